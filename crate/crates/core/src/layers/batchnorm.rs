use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Batch normalization over the last axis.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running estimates (`running = momentum·running + (1−momentum)·batch`);
/// inference mode uses the running estimates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub features: usize,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        BatchNormLayer {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Weight, Tensor::ones(&[features])),
            beta: store.add(format!("{name}.beta"), ParamKind::Bias, Tensor::zeros(&[features])),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            features,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.last() != Some(&self.features) {
            return Err(Error::dim(format!(
                "batch norm over {} features got {s:?}",
                self.features
            )));
        }
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        if training {
            let (y, mean, var) = tape.batch_norm(x, gamma, beta, self.epsilon)?;
            let m = self.momentum;
            for j in 0..self.features {
                self.running_mean[j] = m * self.running_mean[j] + (1.0 - m) * mean[j];
                self.running_var[j] = m * self.running_var[j] + (1.0 - m) * var[j];
            }
            Ok(y)
        } else {
            let mean = tape.constant(Tensor::new(vec![self.features], self.running_mean.clone())?);
            let inv = self
                .running_var
                .iter()
                .map(|v| 1.0 / (v + self.epsilon).sqrt())
                .collect();
            let inv = tape.constant(Tensor::new(vec![self.features], inv)?);
            let centered = tape.sub(x, mean)?;
            let xhat = tape.mul(centered, inv)?;
            let scaled = tape.mul(xhat, gamma)?;
            tape.add(scaled, beta)
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> Tensor {
        Tensor::matrix(&[&[1.0, -3.0], &[2.0, 0.5], &[4.5, 7.0], &[-1.0, 2.0]])
    }

    #[test]
    fn training_output_is_standardized() {
        let mut store = ParamStore::new();
        let mut bn = BatchNormLayer::new(&mut store, "bn", 2);
        bn.epsilon = 1e-12;
        let mut tape = Tape::new();
        let x = tape.constant(batch());
        let y = bn.forward(&mut tape, &store, x, true).unwrap();
        let d = tape.value(y).data();
        for j in 0..2 {
            let col: Vec<f64> = d.chunks(2).map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gamma_collapses_to_beta() {
        let mut store = ParamStore::new();
        let mut bn = BatchNormLayer::new(&mut store, "bn", 2);
        store.set_data(bn.gamma, &[0.0, 0.0]).unwrap();
        store.set_data(bn.beta, &[5.0, 5.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch());
        let y = bn.forward(&mut tape, &store, x, true).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn inference_with_identity_statistics() {
        let mut store = ParamStore::new();
        let mut bn = BatchNormLayer::new(&mut store, "bn", 2);
        let mut tape = Tape::new();
        let x = tape.constant(batch());
        let y = bn.forward(&mut tape, &store, x, false).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(batch().data()) {
            assert!((a - b).abs() < 1e-3 * b.abs().max(1.0));
        }
    }

    #[test]
    fn single_row_training_is_rejected() {
        let mut store = ParamStore::new();
        let mut bn = BatchNormLayer::new(&mut store, "bn", 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[&[1.0, 2.0]]));
        assert!(matches!(
            bn.forward(&mut tape, &store, x, true),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        let mut bn = BatchNormLayer::new(&mut store, "bn", 1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[&[2.0], &[4.0]]));
        bn.forward(&mut tape, &store, x, true).unwrap();
        assert!((bn.running_mean[0] - 0.03).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.99 + 0.01)).abs() < 1e-12);
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    }
}
