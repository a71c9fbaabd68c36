//! Declarative single-head, multi-head and SAN model assembly.

mod head;
mod spec;

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use head::Head;
pub use spec::{ConvSpec, HeadMode, HeadSpec, HeadType, ModelSpec, DEFAULT_TRUNK, DEFAULT_WINDOW};

use crate::error::{Error, Result};
use crate::layers::init::InitRng;
use crate::layers::{Activation, BatchNormLayer, DenseLayer};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrunkLayer {
    dense: DenseLayer,
    norm: Option<BatchNormLayer>,
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B×1]` RUL estimates.
    pub output: Var,
    /// Per-head feature vectors before concatenation.
    pub head_features: Vec<Var>,
    /// Every attention weight matrix `[B×T×T]` produced on the way.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    heads: Vec<Head>,
    trunk: Vec<TrunkLayer>,
}

/// Builds a model; SAN specs are routed to [`build_san`].
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut rng = InitRng::seed_from_u64(spec.seed);
    let (n_heads, channels) = match spec.mode {
        HeadMode::SingleHead => (1, spec.n_signals),
        HeadMode::MultiHead => (spec.n_signals, 1),
    };
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        heads.push(Head::build(
            &mut store,
            &mut rng,
            &format!("head{i}"),
            &spec.head,
            channels,
            spec.window_length,
        )?);
    }
    let mut input: usize = heads.iter().map(|h| h.out_dim).sum();
    let mut trunk = Vec::new();
    for (i, &w) in spec.trunk_hidden().iter().enumerate() {
        let name = format!("trunk{i}");
        let dense = DenseLayer::new(&mut store, &mut rng, &name, input, w, Activation::LeakyRelu);
        let norm = Some(BatchNormLayer::new(&mut store, &format!("{name}.bn"), w));
        trunk.push(TrunkLayer { dense, norm });
        input = w;
    }
    let out = DenseLayer::new(&mut store, &mut rng, "output", input, 1, Activation::Identity);
    trunk.push(TrunkLayer { dense: out, norm: None });
    Ok(Model {
        spec: spec.clone(),
        store,
        heads,
        trunk,
    })
}

/// Builds a stand-alone self-attention model.
pub fn build_san(spec: &ModelSpec) -> Result<Model> {
    if spec.head.head_type != HeadType::San {
        return Err(Error::config(format!(
            "build_san needs head_type san, got {}",
            spec.head.head_type.name()
        )));
    }
    build_model(spec)
}

/// Total trainable scalars, from closed-form per-layer counts.
pub fn count_params(model: &Model) -> usize {
    model.heads.iter().map(Head::param_count).sum::<usize>()
        + model
            .trunk
            .iter()
            .map(|l| l.dense.in_dim * l.dense.out_dim + l.dense.out_dim + l.norm.as_ref().map_or(0, |n| 2 * n.features))
            .sum::<usize>()
}

impl Model {
    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_param_ids(&self, i: usize) -> Vec<ParamId> {
        self.heads[i].param_ids()
    }

    pub fn trunk_param_ids(&self) -> Vec<ParamId> {
        self.trunk
            .iter()
            .flat_map(|l| {
                let mut ids = l.dense.param_ids();
                if let Some(n) = &l.norm {
                    ids.extend(n.param_ids());
                }
                ids
            })
            .collect()
    }

    /// Feature extraction for every head; `x` is `[B×T×S]`.
    pub fn head_features(&mut self, tape: &mut Tape, x: Var, training: bool) -> Result<(Vec<Var>, Vec<Var>)> {
        let s = tape.shape(x).to_vec();
        let expect = [self.spec.window_length, self.spec.n_signals];
        if s.len() != 3 || s[1..] != expect {
            return Err(Error::dim(format!(
                "model expects [batch×{}×{}], got {s:?}",
                expect[0], expect[1]
            )));
        }
        let bn_training = training && s[0] >= 2;
        let mut feats = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::new();
        let multi = self.spec.mode == HeadMode::MultiHead;
        for (i, head) in self.heads.iter_mut().enumerate() {
            let input = if multi { tape.select_last(x, i)? } else { x };
            feats.push(head.forward(tape, &self.store, input, bn_training, &mut weights)?);
        }
        Ok((feats, weights))
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, training: bool) -> Result<Forward> {
        let (head_features, attention) = self.head_features(tape, x, training)?;
        let bn_training = training && tape.shape(x)[0] >= 2;
        let mut h = if head_features.len() == 1 {
            head_features[0]
        } else {
            tape.concat_last(&head_features)?
        };
        for layer in self.trunk.iter_mut() {
            h = layer.dense.forward(tape, &self.store, h)?;
            if let Some(n) = layer.norm.as_mut() {
                h = n.forward(tape, &self.store, h, bn_training)?;
            }
        }
        Ok(Forward {
            output: h,
            head_features,
            attention,
        })
    }

    /// Inference on a `[B×T×S]` tensor, in chunks of `batch` rows.
    pub fn predict(&mut self, x: &Tensor, batch: usize) -> Result<Vec<f64>> {
        let s = x.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("predict expects a rank-3 tensor, got {s:?}")));
        }
        let row = s[1] * s[2];
        let mut out = Vec::with_capacity(s[0]);
        for chunk in x.data().chunks(row * batch.max(1)) {
            let n = chunk.len() / row;
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(vec![n, s[1], s[2]], chunk.to_vec())?);
            let f = self.forward(&mut tape, xv, false)?;
            out.extend_from_slice(tape.value(f.output).data());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::State(format!("serialize model: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: Model = serde_json::from_str(&text).map_err(|e| Error::State(format!("{}: {e}", path.display())))?;
        for id in m.store.ids().collect::<Vec<_>>() {
            m.store.get_mut(id).set_requires_grad(true);
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionConfig, AttentionMode, ScoreKind};
    use crate::layers::{CellKind, RecurrentCell};

    fn fnn_spec(mode: HeadMode, n: usize, window: usize) -> ModelSpec {
        let mut head = HeadSpec::default_for(HeadType::Fnn);
        head.layer_sizes = vec![4];
        let mut s = ModelSpec::new(mode, head, n);
        s.trunk_sizes = vec![3];
        s.window_length = window;
        s
    }

    fn brute_count(m: &Model) -> usize {
        m.store.ids().map(|id| m.store.get(id).numel()).sum()
    }

    #[test]
    fn zero_input_gives_output_bias() {
        let mut m = build_model(&fnn_spec(HeadMode::MultiHead, 2, 5)).unwrap();
        let out_b = m.trunk.last().unwrap().dense.b;
        m.store.set_data(out_b, &[0.7]).unwrap();
        let y = m.predict(&Tensor::zeros(&[2, 5, 2]), 8).unwrap();
        assert_eq!(y, vec![0.7, 0.7]);
    }

    #[test]
    fn single_and_multi_differ_in_size() {
        let a = build_model(&fnn_spec(HeadMode::SingleHead, 3, 5)).unwrap();
        let b = build_model(&fnn_spec(HeadMode::MultiHead, 3, 5)).unwrap();
        assert_ne!(count_params(&a), count_params(&b));
        assert_eq!(b.n_heads(), 3);
    }

    #[test]
    fn seventeen_signal_window_shape() {
        let mut s = ModelSpec::new(HeadMode::MultiHead, HeadSpec::default_for(HeadType::Fnn), 17);
        s.window_length = 90;
        let mut m = build_model(&s).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 90, 17], 0.5));
        let f = m.forward(&mut tape, x, false).unwrap();
        assert_eq!(tape.shape(f.output), &[1, 1]);
    }

    #[test]
    fn conv_on_fnn_is_config_error() {
        let mut s = fnn_spec(HeadMode::SingleHead, 2, 5);
        s.head.conv = Some(ConvSpec::default());
        assert!(matches!(build_model(&s), Err(Error::Config(_))));
        let s = fnn_spec(HeadMode::SingleHead, 2, 5);
        assert!(matches!(build_san(&s), Err(Error::Config(_))));
    }

    #[test]
    fn closed_form_counts() {
        let mut store = ParamStore::new();
        let mut rng = InitRng::seed_from_u64(0);
        let d = DenseLayer::new(&mut store, &mut rng, "d", 3, 2, Activation::Identity);
        assert_eq!(d.in_dim * d.out_dim + d.out_dim, 8);
        let c = RecurrentCell::new(&mut store, &mut rng, "c", CellKind::Lstm, 2, 3);
        assert_eq!(c.param_count(), 72);
        assert_eq!(
            brute_count(&Model {
                spec: fnn_spec(HeadMode::SingleHead, 1, 1),
                store,
                heads: vec![],
                trunk: vec![]
            }),
            80
        );
    }

    #[test]
    fn counts_match_walk_for_every_head() {
        let attn = AttentionConfig::new(ScoreKind::Additive, AttentionMode::Soft);
        for ht in HeadType::ALL {
            for mode in [HeadMode::SingleHead, HeadMode::MultiHead] {
                for with_attn in [false, true] {
                    let mut head = HeadSpec::default_for(ht);
                    head.layer_sizes = vec![3, 2];
                    if let Some(c) = head.conv.as_mut() {
                        c.channels = 2;
                        c.kernel_width = 3;
                    }
                    if with_attn {
                        head = head.with_attention(AttentionConfig { units: 4, ..attn });
                    }
                    let mut s = ModelSpec::new(mode, head, 2);
                    s.window_length = 6;
                    s.trunk_sizes = vec![4, 1];
                    let mut m = build_model(&s).unwrap();
                    assert_eq!(count_params(&m), brute_count(&m), "{}", s.label());
                    let mut tape = Tape::new();
                    let x = tape.constant(Tensor::full(&[3, 6, 2], 0.3));
                    let f = m.forward(&mut tape, x, true).unwrap();
                    assert_eq!(tape.shape(f.output), &[3, 1]);
                    assert!(tape.value(f.output).is_finite());
                }
            }
        }
    }

    #[test]
    fn multi_head_total_is_replicated() {
        let single = build_model(&fnn_spec(HeadMode::MultiHead, 1, 5)).unwrap();
        let multi = build_model(&fnn_spec(HeadMode::MultiHead, 4, 5)).unwrap();
        assert_eq!(
            multi.heads().iter().map(Head::param_count).sum::<usize>(),
            4 * single.heads()[0].param_count()
        );
    }

    #[test]
    fn same_seed_same_params() {
        let s = fnn_spec(HeadMode::MultiHead, 2, 5);
        assert_eq!(
            build_model(&s).unwrap().store.flatten(),
            build_model(&s).unwrap().store.flatten()
        );
        let mut s2 = s.clone();
        s2.seed = 9;
        assert_ne!(
            build_model(&s).unwrap().store.flatten(),
            build_model(&s2).unwrap().store.flatten()
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = build_model(&fnn_spec(HeadMode::MultiHead, 2, 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        let mut back = Model::load(&p).unwrap();
        let x = Tensor::full(&[2, 5, 2], 0.25);
        assert_eq!(m.predict(&x, 4).unwrap(), back.predict(&x, 4).unwrap());
    }
}
