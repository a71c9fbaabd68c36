use serde::{Deserialize, Serialize};

use super::{AttentionConfig, AttentionMode, ScoreKind};
use crate::error::{Error, Result};
use crate::layers::init::{glorot, InitRng};
use crate::tensor::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
enum ScoreNet {
    /// `e = σ(W_a·tanh(x_t W_t + x_t' W_x + b_t) + b_a)`
    Additive {
        w_t: ParamId,
        w_x: ParamId,
        b_t: ParamId,
        w_a: ParamId,
        b_a: ParamId,
    },
    /// `x_tᵀ W x_t'`
    Bilinear { w: ParamId },
    /// `vᵀ tanh(W₁ x_t + W₂ x_t')`
    AdditiveNoBias { w1: ParamId, w2: ParamId, v: ParamId },
    /// `W_a x_t'`, shared by every query row.
    Location { w_a: ParamId },
    /// Dot, scaled dot and cosine scores have no weights.
    Free,
}

/// Self-attention over the timesteps of `[B×T×d]` sequences.
///
/// Scores `e_{t,t'}` between every pair of timesteps are normalized per row
/// with a softmax into `α`, and each output row is `l_t = Σ_{t'} α_{t,t'} x_{t'}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelfAttentionLayer {
    pub config: AttentionConfig,
    pub dim: usize,
    net: ScoreNet,
}

impl SelfAttentionLayer {
    pub fn new(store: &mut ParamStore, rng: &mut InitRng, name: &str, dim: usize, config: AttentionConfig) -> Self {
        let da = config.units;
        let mut weight = |store: &mut ParamStore, n: &str, shape: &[usize], fi: usize, fo: usize| {
            store.add(
                format!("{name}.{n}"),
                ParamKind::AttentionWeight,
                glorot(rng, shape, fi, fo),
            )
        };
        let net = match config.score_kind {
            ScoreKind::Additive => ScoreNet::Additive {
                w_t: weight(store, "W_t", &[dim, da], dim, da),
                w_x: weight(store, "W_x", &[dim, da], dim, da),
                b_t: store.add(format!("{name}.b_t"), ParamKind::AttentionBias, Tensor::zeros(&[da])),
                w_a: weight(store, "W_a", &[da, 1], da, 1),
                b_a: store.add(format!("{name}.b_a"), ParamKind::AttentionBias, Tensor::zeros(&[1])),
            },
            ScoreKind::General | ScoreKind::MulEq25 => ScoreNet::Bilinear {
                w: weight(store, "W", &[dim, dim], dim, dim),
            },
            ScoreKind::AddEq25 => ScoreNet::AdditiveNoBias {
                w1: weight(store, "W_1", &[dim, da], dim, da),
                w2: weight(store, "W_2", &[dim, da], dim, da),
                v: weight(store, "v_a", &[da, 1], da, 1),
            },
            ScoreKind::LocationBased => ScoreNet::Location {
                w_a: weight(store, "W_a", &[dim, 1], dim, 1),
            },
            ScoreKind::Dot | ScoreKind::ScaledDot | ScoreKind::ContentBased => ScoreNet::Free,
        };
        SelfAttentionLayer { config, dim, net }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.net {
            ScoreNet::Additive {
                w_t,
                w_x,
                b_t,
                w_a,
                b_a,
            } => vec![*w_t, *w_x, *b_t, *w_a, *b_a],
            ScoreNet::Bilinear { w } => vec![*w],
            ScoreNet::AdditiveNoBias { w1, w2, v } => vec![*w1, *w2, *v],
            ScoreNet::Location { w_a } => vec![*w_a],
            ScoreNet::Free => vec![],
        }
    }

    /// Sets every score parameter to zero, which makes all scores equal.
    pub fn zero_params(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            let n = store.get(id).numel();
            store.set_data(id, &vec![0.0; n]).expect("same size");
        }
    }

    /// `x·W` applied at every timestep of `x: [B×T×d]`.
    fn project(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let wv = tape.param(store, w);
        let out = tape.shape(wv)[1];
        let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
        let p = tape.matmul(flat, wv)?;
        tape.reshape(p, &[s[0], s[1], out])
    }

    /// Raw pairwise scores `[B×T×T]` before the softmax.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        match (&self.net, self.config.score_kind) {
            (
                ScoreNet::Additive {
                    w_t,
                    w_x,
                    b_t,
                    w_a,
                    b_a,
                },
                _,
            ) => {
                let q = Self::project(tape, store, x, *w_t)?;
                let k = Self::project(tape, store, x, *w_x)?;
                let bt = tape.param(store, *b_t);
                let wa = tape.param(store, *w_a);
                let raw = tape.additive_scores(q, k, Some(bt), wa)?;
                let ba = tape.param(store, *b_a);
                let raw = tape.add(raw, ba)?;
                tape.sigmoid(raw)
            }
            (ScoreNet::Bilinear { w }, _) => {
                let q = Self::project(tape, store, x, *w)?;
                let xt = tape.transpose(x)?;
                tape.batch_matmul(q, xt)
            }
            (ScoreNet::AdditiveNoBias { w1, w2, v }, _) => {
                let q = Self::project(tape, store, x, *w1)?;
                let k = Self::project(tape, store, x, *w2)?;
                let vv = tape.param(store, *v);
                tape.additive_scores(q, k, None, vv)
            }
            (ScoreNet::Location { w_a }, _) => {
                let k = Self::project(tape, store, x, *w_a)?;
                let kt = tape.transpose(k)?;
                let ones = tape.constant(Tensor::ones(&[b, t, 1]));
                tape.batch_matmul(ones, kt)
            }
            (ScoreNet::Free, kind) => {
                let (q, k) = if kind == ScoreKind::ContentBased {
                    let n = tape.row_normalize(x)?;
                    (n, n)
                } else {
                    (x, x)
                };
                let kt = tape.transpose(k)?;
                let dots = tape.batch_matmul(q, kt)?;
                if kind == ScoreKind::ScaledDot {
                    tape.scale(dots, 1.0 / (self.dim as f64).sqrt())
                } else {
                    Ok(dots)
                }
            }
        }
    }

    /// Returns `(context [B×T×d], weights [B×T×T])`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::dim(format!(
                "self-attention over {} features expects [B×T×{}], got {s:?}",
                self.dim, self.dim
            )));
        }
        let scores = self.scores(tape, store, x)?;
        let soft = tape.softmax(scores)?;
        let alpha = match self.config.mode {
            AttentionMode::Soft => soft,
            AttentionMode::Hard => tape.straight_through_argmax(soft)?,
        };
        let context = tape.batch_matmul(alpha, x)?;
        Ok((context, alpha))
    }

    /// Unbatched form: `[T×d] → ([T×d], [T×T])`.
    pub fn forward_seq(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("expected [T×d], got {s:?}")));
        }
        if s[0] == 0 {
            return Err(Error::Contract("self-attention needs at least one timestep".into()));
        }
        let xb = tape.reshape(x, &[1, s[0], s[1]])?;
        let (c, a) = self.forward(tape, store, xb)?;
        let c = tape.reshape(c, &s)?;
        let a = tape.reshape(a, &[s[0], s[0]])?;
        Ok((c, a))
    }
}

/// `coefficient · ‖ααᵀ − I‖²_F`, averaged over the batch for `[B×T×T]`
/// weights.
pub fn attention_regularizer(tape: &mut Tape, weights: Var, coefficient: f64) -> Result<Var> {
    let s = tape.shape(weights).to_vec();
    let (b, t) = match s.as_slice() {
        [r, c] if r == c => (1, *r),
        [b, r, c] if r == c => (*b, *r),
        _ => {
            return Err(Error::dim(format!(
                "attention regularizer needs square weights, got {s:?}"
            )))
        }
    };
    let a = tape.reshape(weights, &[b, t, t])?;
    let at = tape.transpose(a)?;
    let gram = tape.batch_matmul(a, at)?;
    let eye = tape.constant(Tensor::eye(t));
    let diff = tape.sub(gram, eye)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, coefficient / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn layer(kind: ScoreKind, mode: AttentionMode, dim: usize) -> (ParamStore, SelfAttentionLayer) {
        let mut store = ParamStore::new();
        let mut rng = InitRng::seed_from_u64(5);
        let l = SelfAttentionLayer::new(&mut store, &mut rng, "att", dim, AttentionConfig::new(kind, mode));
        (store, l)
    }

    fn random_seq(rng: &mut InitRng, b: usize, t: usize, d: usize) -> Tensor {
        let data = (0..b * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![b, t, d], data).unwrap()
    }

    #[test]
    fn single_timestep_is_identity() {
        for kind in ScoreKind::ALL {
            let (store, l) = layer(kind, AttentionMode::Soft, 3);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(&[&[0.2, -0.4, 0.9]]));
            let (c, a) = l.forward_seq(&mut tape, &store, x).unwrap();
            assert_eq!(tape.value(a).data(), &[1.0]);
            assert_eq!(tape.value(c).data(), &[0.2, -0.4, 0.9]);
        }
    }

    #[test]
    fn zero_parameters_give_row_means() {
        let (mut store, l) = layer(ScoreKind::Additive, AttentionMode::Soft, 2);
        l.zero_params(&mut store);
        let x = Tensor::matrix(&[&[1.0, 4.0], &[2.0, -2.0], &[6.0, 1.0]]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (c, a) = l.forward_seq(&mut tape, &store, xv).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        for row in tape.value(c).data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12);
            assert!((row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_mode_selects_input_rows() {
        let (store, l) = layer(ScoreKind::Dot, AttentionMode::Hard, 3);
        let x = Tensor::matrix(&[&[10.0, 0.0, 1.0], &[0.0, 10.0, 2.0], &[1.0, 0.0, 10.0]]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (c, a) = l.forward_seq(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(a).data(), Tensor::eye(3).data());
        assert_eq!(tape.value(c).data(), x.data());
    }

    #[test]
    fn location_scores_share_one_row() {
        let (store, l) = layer(ScoreKind::LocationBased, AttentionMode::Soft, 2);
        let mut rng = InitRng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.constant(random_seq(&mut rng, 1, 4, 2));
        let (_, a) = l.forward(&mut tape, &store, x).unwrap();
        let d = tape.value(a).data();
        for row in d.chunks(4).skip(1) {
            assert_eq!(row, &d[..4]);
        }
    }

    #[test]
    fn weights_are_row_stochastic_and_context_in_hull() {
        let mut rng = InitRng::seed_from_u64(21);
        for kind in ScoreKind::ALL {
            let (store, l) = layer(kind, AttentionMode::Soft, 3);
            let x = random_seq(&mut rng, 2, 5, 3);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (c, a) = l.forward(&mut tape, &store, xv).unwrap();
            for row in tape.value(a).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
            let (xd, cd) = (x.data(), tape.value(c).data());
            for b in 0..2 {
                for f in 0..3 {
                    let col = (0..5).map(|t| xd[(b * 5 + t) * 3 + f]);
                    let (lo, hi) = col.fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
                    for t in 0..5 {
                        let v = cd[(b * 5 + t) * 3 + f];
                        assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{kind:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn regularizer_examples() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::eye(3));
        let r = attention_regularizer(&mut tape, eye, 1e-4).unwrap();
        assert_eq!(tape.scalar(r), 0.0);
        let uni = tape.constant(Tensor::full(&[2, 2], 0.5));
        let r = attention_regularizer(&mut tape, uni, 1e-4).unwrap();
        assert!((tape.scalar(r) - 1e-4).abs() < 1e-18);
        let r = attention_regularizer(&mut tape, uni, 0.0).unwrap();
        assert_eq!(tape.scalar(r), 0.0);
        let rect = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            attention_regularizer(&mut tape, rect, 1.0),
            Err(Error::Dimension(_))
        ));
    }
}
