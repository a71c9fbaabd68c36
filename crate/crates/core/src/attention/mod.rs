//! Alignment scores, the self-attention layer and its Frobenius regularizer.

mod layer;
mod score;

pub use layer::{attention_regularizer, SelfAttentionLayer};
pub use score::{alignment_score, attention_weights, ScoreParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default weight of the attention, kernel and bias regularizers.
pub const DEFAULT_REGULARIZER_WEIGHT: f64 = 1e-4;
/// Default hidden width `d_a` of the additive score network.
pub const DEFAULT_UNITS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `h_tᵀ·h_s`
    Dot,
    /// `h_tᵀ·h_s / √H`
    ScaledDot,
    /// `v_aᵀ·tanh(W_a[h_t; h_s])`. In the self-attention layer this is the
    /// tanh/sigmoid network `σ(W_a·tanh(x_tW_t + x_t'W_x + b_t) + b_a)`.
    Additive,
    /// `cosine(h_t, h_s)`
    ContentBased,
    /// `h_tᵀ·W_a·h_s`
    General,
    /// `W_a·h_t`. Independent of the paired vector: inside the layer every
    /// query row shares one score vector over key positions.
    LocationBased,
    /// Multiplicative `h_tᵀ W h_j`.
    MulEq25,
    /// Additive `v_aᵀ tanh(W₁h_t + W₂h_j)` without bias or sigmoid.
    AddEq25,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 8] = [
        ScoreKind::Dot,
        ScoreKind::ScaledDot,
        ScoreKind::Additive,
        ScoreKind::ContentBased,
        ScoreKind::General,
        ScoreKind::LocationBased,
        ScoreKind::MulEq25,
        ScoreKind::AddEq25,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Dot => "dot",
            ScoreKind::ScaledDot => "scaled_dot",
            ScoreKind::Additive => "additive",
            ScoreKind::ContentBased => "content_based",
            ScoreKind::General => "general",
            ScoreKind::LocationBased => "location_based",
            ScoreKind::MulEq25 => "mul_eq25",
            ScoreKind::AddEq25 => "add_eq25",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown score kind '{s}'")))
    }
}

/// Soft attention uses the softmax weights directly. Hard attention keeps
/// only each row's largest weight (one-hot) in the forward pass and passes
/// gradients through the soft weights (straight-through estimator).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Soft,
    Hard,
}

impl AttentionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(AttentionMode::Soft),
            "hard" => Ok(AttentionMode::Hard),
            _ => Err(Error::config(format!("unknown attention mode '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Soft => "soft",
            AttentionMode::Hard => "hard",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub score_kind: ScoreKind,
    pub mode: AttentionMode,
    #[serde(default = "default_reg")]
    pub regularizer_weight: f64,
    #[serde(default = "default_units")]
    pub units: usize,
}

fn default_reg() -> f64 {
    DEFAULT_REGULARIZER_WEIGHT
}

fn default_units() -> usize {
    DEFAULT_UNITS
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            score_kind: ScoreKind::Additive,
            mode: AttentionMode::Soft,
            regularizer_weight: DEFAULT_REGULARIZER_WEIGHT,
            units: DEFAULT_UNITS,
        }
    }
}

impl AttentionConfig {
    pub fn new(score_kind: ScoreKind, mode: AttentionMode) -> Self {
        AttentionConfig {
            score_kind,
            mode,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.regularizer_weight >= 0.0 && self.regularizer_weight.is_finite()) {
            errs.push(format!(
                "attention regularizer_weight must be a finite value ≥ 0, got {}",
                self.regularizer_weight
            ));
        }
        if self.units == 0 {
            errs.push("attention units must be positive".into());
        }
        errs
    }

    /// Short label such as `soft-mul_eq25`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.mode.name(), self.score_kind.name())
    }
}
