//! Mini-batch training with Adam.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_regularizer, AttentionConfig};
use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::model::{HeadType, Model};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Weight of the L2 penalty on attention kernels and biases.
    pub regularizer_weight: f64,
    pub shuffle: bool,
    /// Fraction of training units held out for a validation loss; 0 disables.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            regularizer_weight: 1e-4,
            shuffle: true,
            holdout_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            errs.push("batch_size must be at least 2 (batch norm needs two rows)".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            errs.push("learning_rate must be a finite non-negative number".into());
        }
        if !(self.regularizer_weight >= 0.0 && self.regularizer_weight.is_finite()) {
            errs.push("regularizer_weight must be a finite non-negative number".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            errs.push("holdout_fraction must lie in [0, 1)".into());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adaptive_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Adam over every tensor of a store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub lr: f64,
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Optimizer {
            lr,
            states: store.ids().map(|id| AdamState::new(store.get(id).numel())).collect(),
        }
    }

    /// Applies accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let name = store.name(id).to_string();
            let t = store.get_mut(id);
            let g = match t.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at element {bad} of {name}"
                )));
            }
            adaptive_step(t.data_mut(), &g, &mut self.states[k], self.lr)?;
        }
        store.zero_grads();
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// `epoch,loss[,val_loss]`; timings go to [`History::timing_csv`] so this
    /// file is reproducible.
    pub fn to_csv(&self) -> String {
        let val = self.epochs.iter().any(|e| e.val_loss.is_some());
        let mut s = String::from(if val { "epoch,loss,val_loss\n" } else { "epoch,loss\n" });
        for e in &self.epochs {
            let _ = write!(s, "{},{:.9}", e.epoch, e.loss);
            if let Some(v) = e.val_loss {
                let _ = write!(s, ",{v:.9}");
            }
            s.push('\n');
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,wall_time_s\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.3}", e.epoch, e.wall_time_s);
        }
        s
    }
}

/// Attention settings the model trains with, if it has attention at all.
fn model_attention(model: &Model) -> Option<AttentionConfig> {
    match model.spec.head.head_type {
        HeadType::San => Some(model.spec.head.attention.unwrap_or_default()),
        _ => model.spec.head.attention,
    }
}

/// Full training objective for one batch; returns `(loss, mse)` vars.
pub fn batch_loss(
    model: &mut Model,
    tape: &mut Tape,
    x: Var,
    targets: &[f64],
    reg_weight: f64,
    training: bool,
) -> Result<(Var, Var)> {
    let f = model.forward(tape, x, training)?;
    let y = tape.constant(Tensor::new(vec![targets.len(), 1], targets.to_vec())?);
    let diff = tape.sub(f.output, y)?;
    let sq = tape.square(diff)?;
    let mse = tape.mean(sq)?;
    let mut loss = mse;
    if let Some(cfg) = model_attention(model) {
        for &a in &f.attention {
            let r = attention_regularizer(tape, a, cfg.regularizer_weight)?;
            loss = tape.add(loss, r)?;
        }
    }
    if reg_weight > 0.0 {
        let ids: Vec<_> = model
            .store
            .ids()
            .filter(|&id| model.store.kind(id).is_attention())
            .collect();
        for id in ids {
            let p = tape.param(&model.store, id);
            let sq = tape.square(p)?;
            let s = tape.sum(sq)?;
            let s = tape.scale(s, reg_weight)?;
            loss = tape.add(loss, s)?;
        }
    }
    Ok((loss, mse))
}

/// Unit-level split: `(train_rows, holdout_rows)`.
fn split_holdout(data: &WindowBatch, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let all: Vec<usize> = (0..data.len()).collect();
    if fraction == 0.0 {
        return (all, Vec::new());
    }
    let mut units: Vec<u32> = data.unit_ids.clone();
    units.dedup();
    units.shuffle(rng);
    let n_hold = ((units.len() as f64 * fraction).round() as usize).clamp(1, units.len().saturating_sub(1).max(1));
    let hold: std::collections::HashSet<u32> = units[..n_hold].iter().copied().collect();
    all.into_iter().partition(|&i| !hold.contains(&data.unit_ids[i]))
}

/// Mean squared error of inference-mode predictions on `idx`.
fn eval_mse(model: &mut Model, data: &WindowBatch, idx: &[usize]) -> Result<f64> {
    let b = data.gather(idx);
    let p = model.predict(&b.windows, 256)?;
    Ok(p.iter().zip(&b.targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / p.len() as f64)
}

/// Trains in place and returns per-epoch mean losses.
pub fn train(model: &mut Model, data: &WindowBatch, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training data is empty".into()));
    }
    let s = data.windows.shape();
    if s[1] != model.spec.window_length || s[2] != model.spec.n_signals {
        return Err(Error::dim(format!(
            "training windows {s:?} do not fit a model expecting [_×{}×{}]",
            model.spec.window_length, model.spec.n_signals
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_idx, hold_idx) = split_holdout(data, cfg.holdout_fraction, &mut rng);
    let mut opt = Optimizer::new(&model.store, cfg.learning_rate);
    let mut history = History::default();
    let row = s[1] * s[2];
    let start = Instant::now();
    let mut order = train_idx;
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut total, mut count) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut xs = Vec::with_capacity(chunk.len() * row);
            for &i in chunk {
                xs.extend_from_slice(&data.windows.data()[i * row..(i + 1) * row]);
            }
            let ys: Vec<f64> = chunk.iter().map(|&i| data.targets[i]).collect();
            let abort = |e: Error| match e {
                Error::Numeric(m) => {
                    Error::Numeric(format!("training aborted at epoch {epoch}, batch {}: {m}", bi + 1))
                }
                other => other,
            };
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![chunk.len(), s[1], s[2]], xs)?);
            let (loss, _) = batch_loss(model, &mut tape, x, &ys, cfg.regularizer_weight, true).map_err(abort)?;
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(abort(Error::Numeric(format!("loss is {lv}"))));
            }
            tape.backward(loss).map_err(abort)?;
            tape.accumulate_param_grads(&mut model.store)?;
            opt.step(&mut model.store).map_err(abort)?;
            total += lv * chunk.len() as f64;
            count += chunk.len();
        }
        let val_loss = if hold_idx.is_empty() {
            None
        } else {
            Some(eval_mse(model, data, &hold_idx)?)
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: total / count as f64,
            val_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, HeadMode, HeadSpec, ModelSpec};

    fn tiny_model(seed: u64) -> Model {
        let mut head = HeadSpec::default_for(HeadType::Fnn);
        head.layer_sizes = vec![4];
        let mut s = ModelSpec::new(HeadMode::SingleHead, head, 2);
        s.window_length = 3;
        s.trunk_sizes = vec![1];
        s.seed = seed;
        build_model(&s).unwrap()
    }

    fn tiny_data(n: usize) -> WindowBatch {
        let data: Vec<f64> = (0..n * 6).map(|k| ((k * 37 % 11) as f64) / 10.0).collect();
        WindowBatch {
            windows: Tensor::new(vec![n, 3, 2], data).unwrap(),
            targets: (0..n).map(|i| i as f64 / n as f64).collect(),
            unit_ids: (0..n as u32).map(|i| i / 2 + 1).collect(),
            end_cycles: vec![3; n],
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        for _ in 0..10 {
            adaptive_step(&mut p, &[0.0, 0.0], &mut st, 0.1).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        adaptive_step(&mut p, &[3.0, -0.5], &mut st, 0.01).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..5000 {
            adaptive_step(&mut p, &[2.0], &mut st, 1e-3).unwrap();
            step = prev - p[0];
            prev = p[0];
        }
        assert!((step - 1e-3).abs() < 1e-8);
        assert!(matches!(
            adaptive_step(&mut p, &[1.0, 2.0], &mut st, 1e-3),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn adam_reduces_quadratic() {
        for &w0 in &[-3.0, -0.1, 0.5, 7.0] {
            for &lr in &[1e-3, 0.05, 0.1] {
                let mut p = vec![w0];
                let mut st = AdamState::new(1);
                let target = 1.0;
                let before = 0.5 * (p[0] - target) * (p[0] - target);
                let g = p[0] - target;
                adaptive_step(&mut p, &[g], &mut st, lr).unwrap();
                let after = 0.5 * (p[0] - target) * (p[0] - target);
                assert!(after < before, "w0={w0} lr={lr}");
            }
        }
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut m = tiny_model(0);
        let before = m.store.flatten();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.0,
            ..Default::default()
        };
        train(&mut m, &tiny_data(10), &cfg).unwrap();
        assert_eq!(m.store.flatten(), before);
    }

    #[test]
    fn deterministic_history() {
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 3,
            seed: 5,
            ..Default::default()
        };
        let d = tiny_data(10);
        let a = train(&mut tiny_model(1), &d, &cfg).unwrap();
        let b = train(&mut tiny_model(1), &d, &cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let c = train(
            &mut tiny_model(1),
            &d,
            &TrainConfig {
                shuffle: false,
                seed: 1,
                ..cfg.clone()
            },
        )
        .unwrap();
        let e = train(
            &mut tiny_model(1),
            &d,
            &TrainConfig {
                shuffle: false,
                seed: 2,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(c.losses(), e.losses());
    }

    #[test]
    fn single_sample_converges() {
        let mut m = tiny_model(2);
        let mut d = tiny_data(1);
        d.targets = vec![0.8];
        let cfg = TrainConfig {
            epochs: 500,
            batch_size: 2,
            learning_rate: 1e-2,
            shuffle: false,
            ..Default::default()
        };
        let h = train(&mut m, &d, &cfg).unwrap().losses();
        assert!(h[499] < 1e-4 * h[0], "{} vs {}", h[499], h[0]);
    }

    #[test]
    fn holdout_reports_validation_loss() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            holdout_fraction: 0.2,
            ..Default::default()
        };
        let h = train(&mut tiny_model(0), &tiny_data(20), &cfg).unwrap();
        assert!(h.epochs.iter().all(|e| e.val_loss.is_some()));
        assert!(h.to_csv().starts_with("epoch,loss,val_loss\n"));
    }

    #[test]
    fn bad_config_lists_every_problem() {
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 1,
            learning_rate: -1.0,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn training_does_not_touch_data() {
        let d = tiny_data(6);
        let copy = d.clone();
        train(
            &mut tiny_model(0),
            &d,
            &TrainConfig {
                epochs: 1,
                batch_size: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(d, copy);
    }
}
