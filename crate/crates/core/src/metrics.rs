//! RMSE, the asymmetric PHM08 score and evaluation reports.
//!
//! Errors are `e = predicted − true`, so `e > 0` is a late prediction. Late
//! predictions cost `exp(e/10) − 1`, early ones `exp(−e/13) − 1`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::model::{count_params, Model};

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "metrics need equal nonzero lengths, got {} predictions and {} targets",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Penalty of one signed error.
pub fn unit_score(e: f64) -> f64 {
    if e < 0.0 {
        (-e / 13.0).exp() - 1.0
    } else {
        (e / 10.0).exp() - 1.0
    }
}

pub fn score(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| unit_score(p - t)).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitResult {
    pub unit_id: u32,
    /// Cycle of the evaluated window's last row.
    pub cycle: u32,
    pub true_rul: f64,
    pub predicted_rul: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub rmse: f64,
    pub score: f64,
    pub per_unit: Vec<UnitResult>,
    pub param_count: usize,
    pub wall_time_s: f64,
    pub seed: u64,
    pub spec_digest: String,
}

pub const CSV_HEADER: &str = "model,seed,rmse,score,parameters,spec_digest";

impl EvalReport {
    /// Builds a report from clamped predictions.
    #[allow(clippy::too_many_arguments)]
    pub fn from_predictions(
        label: &str,
        unit_ids: &[u32],
        cycles: &[u32],
        truth: &[f64],
        pred: &[f64],
        param_count: usize,
        seed: u64,
        spec_digest: String,
    ) -> Result<Self> {
        Ok(EvalReport {
            label: label.to_string(),
            rmse: rmse(pred, truth)?,
            score: score(pred, truth)?,
            per_unit: unit_ids
                .iter()
                .zip(cycles)
                .zip(truth.iter().zip(pred))
                .map(|((&u, &c), (&t, &p))| UnitResult {
                    unit_id: u,
                    cycle: c,
                    true_rul: t,
                    predicted_rul: p,
                    error: p - t,
                })
                .collect(),
            param_count,
            wall_time_s: 0.0,
            seed,
            spec_digest,
        })
    }

    /// CSV row matching [`CSV_HEADER`]. Wall time is kept out so tables are
    /// reproducible byte for byte.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{}",
            self.label, self.seed, self.rmse, self.score, self.param_count, self.spec_digest
        )
    }

    pub fn text_block(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model        {}", self.label);
        let _ = writeln!(s, "seed         {}", self.seed);
        let _ = writeln!(s, "rmse         {:.4}", self.rmse);
        let _ = writeln!(s, "score        {:.4}", self.score);
        let _ = writeln!(s, "parameters   {}", self.param_count);
        let _ = writeln!(s, "wall_time_s  {:.2}", self.wall_time_s);
        let _ = writeln!(s, "test units   {}", self.per_unit.len());
        let _ = writeln!(s, "spec         {}", self.spec_digest);
        s
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn digest(text: &str) -> String {
    let h = Sha256::digest(text.as_bytes());
    h.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Clamps predictions into `[0, r_early]`.
pub fn clamp_predictions(pred: &mut [f64], r_early: f64) {
    for p in pred {
        *p = p.clamp(0.0, r_early);
    }
}

/// Inference-mode evaluation of one window per test unit.
pub fn evaluate(model: &mut Model, test: &WindowBatch, r_early: f64) -> Result<EvalReport> {
    let s = test.windows.shape();
    if s[1] != model.spec.window_length || s[2] != model.spec.n_signals {
        return Err(Error::dim(format!(
            "test windows {s:?} do not fit a model expecting [_×{}×{}]",
            model.spec.window_length, model.spec.n_signals
        )));
    }
    let mut pred = model.predict(&test.windows, 256)?;
    clamp_predictions(&mut pred, r_early);
    let spec_text = serde_json::to_string(&model.spec).expect("spec serializes");
    EvalReport::from_predictions(
        &model.spec.label(),
        &test.unit_ids,
        &test.end_cycles,
        &test.targets,
        &pred,
        count_params(model),
        model.spec.seed,
        digest(&spec_text),
    )
}
