use serde::{Deserialize, Serialize};

use super::spec::{HeadSpec, HeadType};
use crate::attention::{AttentionConfig, SelfAttentionLayer};
use crate::error::Result;
use crate::layers::init::InitRng;
use crate::layers::{Activation, BatchNormLayer, BiLstm, CellKind, Conv1DLayer, DenseLayer, Padding, RecurrentCell};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct SanBlock {
    attention: SelfAttentionLayer,
    dense: DenseLayer,
    norm: BatchNormLayer,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum Extractor {
    /// Flattened window through a dense stack.
    Fnn {
        dense: Vec<DenseLayer>,
    },
    /// Stacked SRNN/GRU/LSTM cells.
    Recurrent {
        cells: Vec<RecurrentCell>,
    },
    Bilstm {
        layers: Vec<BiLstm>,
    },
    /// Convolution, flatten, dense stack.
    Cnn {
        conv: Conv1DLayer,
        dense: Vec<DenseLayer>,
    },
    /// Convolution feeding stacked LSTM cells.
    Cnlstm {
        conv: Conv1DLayer,
        cells: Vec<RecurrentCell>,
    },
    San {
        blocks: Vec<SanBlock>,
    },
}

/// Feature extractor turning a `[B×T×C]` window into `[B×F]` features.
///
/// When attention is configured (and the head is not a SAN, which is built
/// from attention), one self-attention layer sits between the temporal
/// feature extractor and the flatten/pooling step. Recurrent heads then
/// emit the last hidden state concatenated with the time-mean of the
/// attention context.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Head {
    extractor: Extractor,
    attention: Option<SelfAttentionLayer>,
    pub input_channels: usize,
    pub window_length: usize,
    pub out_dim: usize,
}

fn dense_stack(
    store: &mut ParamStore,
    rng: &mut InitRng,
    name: &str,
    mut input: usize,
    sizes: &[usize],
) -> Vec<DenseLayer> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let d = DenseLayer::new(store, rng, &format!("{name}.dense{i}"), input, w, Activation::LeakyRelu);
            input = w;
            d
        })
        .collect()
}

fn cell_stack(
    store: &mut ParamStore,
    rng: &mut InitRng,
    name: &str,
    kind: CellKind,
    mut input: usize,
    sizes: &[usize],
) -> Vec<RecurrentCell> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let c = RecurrentCell::new(
                store,
                rng,
                &format!("{name}.{kind:?}{i}").to_lowercase(),
                kind,
                input,
                h,
            );
            input = h;
            c
        })
        .collect()
}

impl Head {
    pub(crate) fn build(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        spec: &HeadSpec,
        channels: usize,
        window: usize,
    ) -> Result<Self> {
        let sizes = &spec.layer_sizes;
        let last = *sizes.last().expect("validated non-empty");
        let att = |store: &mut ParamStore, rng: &mut InitRng, dim: usize| {
            spec.attention
                .map(|cfg| SelfAttentionLayer::new(store, rng, &format!("{name}.attention"), dim, cfg))
        };
        let (extractor, attention, out_dim) = match spec.head_type {
            HeadType::Fnn => {
                let attention = att(store, rng, channels);
                let dense = dense_stack(store, rng, name, window * channels, sizes);
                (Extractor::Fnn { dense }, attention, last)
            }
            HeadType::Srnn | HeadType::Gru | HeadType::Lstm => {
                let kind = match spec.head_type {
                    HeadType::Srnn => CellKind::Srnn,
                    HeadType::Gru => CellKind::Gru,
                    _ => CellKind::Lstm,
                };
                let cells = cell_stack(store, rng, name, kind, channels, sizes);
                let attention = att(store, rng, last);
                let out = if attention.is_some() { 2 * last } else { last };
                (Extractor::Recurrent { cells }, attention, out)
            }
            HeadType::Bilstm => {
                let mut input = channels;
                let layers = sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &h)| {
                        let l = BiLstm::new(store, rng, &format!("{name}.bilstm{i}"), input, h, h);
                        input = h;
                        l
                    })
                    .collect();
                let attention = att(store, rng, last);
                let out = if attention.is_some() { 2 * last } else { last };
                (Extractor::Bilstm { layers }, attention, out)
            }
            HeadType::Cnn => {
                let c = spec.conv.expect("validated conv");
                let conv = Conv1DLayer::new(
                    store,
                    rng,
                    &format!("{name}.conv"),
                    channels,
                    c.channels,
                    c.kernel_width,
                    c.stride,
                    Padding::Same,
                );
                let steps = conv.geometry(window)?.2;
                let attention = att(store, rng, c.channels);
                let dense = dense_stack(store, rng, name, steps * c.channels, sizes);
                (Extractor::Cnn { conv, dense }, attention, last)
            }
            HeadType::Cnlstm => {
                let c = spec.conv.expect("validated conv");
                let conv = Conv1DLayer::new(
                    store,
                    rng,
                    &format!("{name}.conv"),
                    channels,
                    c.channels,
                    c.kernel_width,
                    c.stride,
                    Padding::Same,
                );
                let cells = cell_stack(store, rng, name, CellKind::Lstm, c.channels, sizes);
                let attention = att(store, rng, last);
                let out = if attention.is_some() { 2 * last } else { last };
                (Extractor::Cnlstm { conv, cells }, attention, out)
            }
            HeadType::San => {
                let cfg = spec.attention.unwrap_or_default();
                let mut dim = channels;
                let blocks = sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let bname = format!("{name}.block{i}");
                        let attention = SelfAttentionLayer::new(store, rng, &format!("{bname}.attention"), dim, cfg);
                        let dense =
                            DenseLayer::new(store, rng, &format!("{bname}.dense"), dim, w, Activation::LeakyRelu);
                        let norm = BatchNormLayer::new(store, &format!("{bname}.bn"), w);
                        dim = w;
                        SanBlock { attention, dense, norm }
                    })
                    .collect();
                (Extractor::San { blocks }, None, last)
            }
        };
        Ok(Head {
            extractor,
            attention,
            input_channels: channels,
            window_length: window,
            out_dim,
        })
    }

    /// Attention configuration in effect, if any.
    pub fn attention_config(&self) -> Option<AttentionConfig> {
        match &self.extractor {
            Extractor::San { blocks } => blocks.first().map(|b| b.attention.config),
            _ => self.attention.as_ref().map(|a| a.config),
        }
    }

    /// Runs the head. Attention weight matrices are appended to `weights`.
    pub(crate) fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        training: bool,
        weights: &mut Vec<Var>,
    ) -> Result<Var> {
        let b = tape.shape(x)[0];
        let attention = self.attention.as_ref();
        match &mut self.extractor {
            Extractor::Fnn { dense } => {
                let mut seq = x;
                if let Some(att) = attention {
                    let (ctx, a) = att.forward(tape, store, x)?;
                    weights.push(a);
                    seq = ctx;
                }
                let n = tape.value(seq).numel() / b;
                let mut h = tape.reshape(seq, &[b, n])?;
                for d in dense.iter() {
                    h = d.forward(tape, store, h)?;
                }
                Ok(h)
            }
            Extractor::Recurrent { cells } => {
                let seq = run_cells(tape, store, cells, x)?;
                pool_last(tape, store, seq, attention, weights)
            }
            Extractor::Cnlstm { conv, cells } => {
                let c = conv.forward(tape, store, x)?;
                let c = tape.leaky_relu(c)?;
                let seq = run_cells(tape, store, cells, c)?;
                pool_last(tape, store, seq, attention, weights)
            }
            Extractor::Bilstm { layers } => {
                let mut seq = x;
                let n = layers.len();
                for (i, layer) in layers.iter().enumerate() {
                    let (f, bw) = layer.states(tape, store, seq)?;
                    let mut ys = Vec::with_capacity(f.len());
                    for (hf, hb) in f.iter().zip(&bw) {
                        let cat = tape.concat_last(&[*hf, *hb])?;
                        ys.push(layer.merge.forward(tape, store, cat)?);
                    }
                    let merged = tape.stack_time(&ys)?;
                    if i + 1 < n {
                        seq = merged;
                        continue;
                    }
                    let cat = tape.concat_last(&[*f.last().expect("T ≥ 1"), bw[0]])?;
                    let last = layer.merge.forward(tape, store, cat)?;
                    return with_context(tape, store, last, merged, attention, weights);
                }
                unreachable!("at least one bidirectional layer")
            }
            Extractor::Cnn { conv, dense } => {
                let c = conv.forward(tape, store, x)?;
                let mut seq = tape.leaky_relu(c)?;
                if let Some(att) = attention {
                    let (ctx, a) = att.forward(tape, store, seq)?;
                    weights.push(a);
                    seq = ctx;
                }
                let n = tape.value(seq).numel() / b;
                let mut h = tape.reshape(seq, &[b, n])?;
                for d in dense.iter() {
                    h = d.forward(tape, store, h)?;
                }
                Ok(h)
            }
            Extractor::San { blocks } => {
                let mut seq = x;
                for block in blocks.iter_mut() {
                    let (ctx, a) = block.attention.forward(tape, store, seq)?;
                    weights.push(a);
                    let h = block.dense.forward(tape, store, ctx)?;
                    seq = block.norm.forward(tape, store, h, training)?;
                }
                tape.mean_time(seq)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        match &self.extractor {
            Extractor::Fnn { dense } => ids.extend(dense.iter().flat_map(|d| d.param_ids())),
            Extractor::Recurrent { cells } => ids.extend(cells.iter().flat_map(|c| c.param_ids())),
            Extractor::Bilstm { layers } => ids.extend(layers.iter().flat_map(|l| l.param_ids())),
            Extractor::Cnn { conv, dense } => {
                ids.extend(conv.param_ids());
                ids.extend(dense.iter().flat_map(|d| d.param_ids()));
            }
            Extractor::Cnlstm { conv, cells } => {
                ids.extend(conv.param_ids());
                ids.extend(cells.iter().flat_map(|c| c.param_ids()));
            }
            Extractor::San { blocks } => {
                for b in blocks {
                    ids.extend(b.attention.param_ids());
                    ids.extend(b.dense.param_ids());
                    ids.extend(b.norm.param_ids());
                }
            }
        }
        if let Some(a) = &self.attention {
            ids.extend(a.param_ids());
        }
        ids
    }

    /// Closed-form count of trainable scalars, derived from layer shapes.
    pub fn param_count(&self) -> usize {
        let dense = |d: &DenseLayer| d.in_dim * d.out_dim + d.out_dim;
        let conv = |c: &Conv1DLayer| c.out_channels * c.in_channels * c.kernel_width + c.out_channels;
        let body: usize = match &self.extractor {
            Extractor::Fnn { dense: ds } => ds.iter().map(dense).sum(),
            Extractor::Recurrent { cells } => cells.iter().map(RecurrentCell::param_count).sum(),
            Extractor::Bilstm { layers } => layers
                .iter()
                .map(|l| l.fwd.param_count() + l.bwd.param_count() + dense(&l.merge))
                .sum(),
            Extractor::Cnn { conv: c, dense: ds } => conv(c) + ds.iter().map(dense).sum::<usize>(),
            Extractor::Cnlstm { conv: c, cells } => {
                conv(c) + cells.iter().map(RecurrentCell::param_count).sum::<usize>()
            }
            Extractor::San { blocks } => blocks
                .iter()
                .map(|b| attention_count(&b.attention) + dense(&b.dense) + 2 * b.norm.features)
                .sum(),
        };
        body + self.attention.as_ref().map_or(0, attention_count)
    }
}

fn attention_count(a: &SelfAttentionLayer) -> usize {
    use crate::attention::ScoreKind::*;
    let (d, da) = (a.dim, a.config.units);
    match a.config.score_kind {
        Additive => 2 * d * da + da + da + 1,
        General | MulEq25 => d * d,
        AddEq25 => 2 * d * da + da,
        LocationBased => d,
        Dot | ScaledDot | ContentBased => 0,
    }
}

/// Runs stacked cells; returns the last cell's per-step outputs.
fn run_cells(tape: &mut Tape, store: &ParamStore, cells: &[RecurrentCell], x: Var) -> Result<Vec<Var>> {
    let mut seq = x;
    let mut outs = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        outs = cell.run(tape, store, seq, false)?;
        if i + 1 < cells.len() {
            seq = tape.stack_time(&outs)?;
        }
    }
    Ok(outs)
}

fn pool_last(
    tape: &mut Tape,
    store: &ParamStore,
    outs: Vec<Var>,
    attention: Option<&SelfAttentionLayer>,
    weights: &mut Vec<Var>,
) -> Result<Var> {
    let last = *outs.last().expect("T ≥ 1");
    if attention.is_none() {
        return Ok(last);
    }
    let seq = tape.stack_time(&outs)?;
    with_context(tape, store, last, seq, attention, weights)
}

/// `[last ; mean_t(attention(seq))]`, or `last` alone without attention.
fn with_context(
    tape: &mut Tape,
    store: &ParamStore,
    last: Var,
    seq: Var,
    attention: Option<&SelfAttentionLayer>,
    weights: &mut Vec<Var>,
) -> Result<Var> {
    match attention {
        None => Ok(last),
        Some(att) => {
            let (ctx, a) = att.forward(tape, store, seq)?;
            weights.push(a);
            let pooled = tape.mean_time(ctx)?;
            tape.concat_last(&[last, pooled])
        }
    }
}
