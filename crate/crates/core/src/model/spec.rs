use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    Fnn,
    Srnn,
    Gru,
    Lstm,
    Bilstm,
    Cnn,
    Cnlstm,
    San,
}

impl HeadType {
    pub const ALL: [HeadType; 8] = [
        HeadType::Fnn,
        HeadType::Srnn,
        HeadType::Gru,
        HeadType::Lstm,
        HeadType::Bilstm,
        HeadType::Cnn,
        HeadType::Cnlstm,
        HeadType::San,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadType::Fnn => "fnn",
            HeadType::Srnn => "srnn",
            HeadType::Gru => "gru",
            HeadType::Lstm => "lstm",
            HeadType::Bilstm => "bilstm",
            HeadType::Cnn => "cnn",
            HeadType::Cnlstm => "cnlstm",
            HeadType::San => "san",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::config(format!("unknown head type '{s}'")))
    }

    pub fn uses_conv(self) -> bool {
        matches!(self, HeadType::Cnn | HeadType::Cnlstm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel_width: usize,
    pub channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            kernel_width: 5,
            channels: 16,
            stride: 1,
        }
    }
}

/// One feature-extraction head.
///
/// `layer_sizes` means: dense widths for `fnn` and for the dense stage after
/// the `cnn` convolution; hidden sizes of stacked cells for the recurrent
/// kinds and `cnlstm`; block widths for `san`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub head_type: HeadType,
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub attention: Option<AttentionConfig>,
    #[serde(default)]
    pub conv: Option<ConvSpec>,
}

impl HeadSpec {
    /// Default widths for a head kind.
    pub fn default_for(head_type: HeadType) -> Self {
        let layer_sizes = match head_type {
            HeadType::Fnn => vec![64, 32],
            HeadType::Cnn => vec![32],
            HeadType::San => vec![32, 32],
            _ => vec![32],
        };
        HeadSpec {
            head_type,
            layer_sizes,
            attention: None,
            conv: head_type.uses_conv().then(ConvSpec::default),
        }
    }

    pub fn with_attention(mut self, cfg: AttentionConfig) -> Self {
        self.attention = Some(cfg);
        self
    }

    fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.layer_sizes.is_empty() {
            errs.push("head layer_sizes must not be empty".into());
        }
        if self.layer_sizes.contains(&0) {
            errs.push("head layer_sizes must all be positive".into());
        }
        match (self.head_type.uses_conv(), &self.conv) {
            (true, None) => errs.push(format!("{} head needs a conv section", self.head_type.name())),
            (false, Some(_)) => errs.push(format!(
                "conv settings are only valid for cnn and cnlstm heads, not {}",
                self.head_type.name()
            )),
            (true, Some(c)) if c.kernel_width == 0 || c.channels == 0 || c.stride == 0 => {
                errs.push("conv kernel_width, channels and stride must be positive".into());
            }
            _ => {}
        }
        if let Some(a) = &self.attention {
            errs.extend(a.validate());
        }
        errs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One head reads every signal.
    SingleHead,
    /// One independent head per signal.
    MultiHead,
}

impl HeadMode {
    pub fn name(self) -> &'static str {
        match self {
            HeadMode::SingleHead => "single_head",
            HeadMode::MultiHead => "multi_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single_head" | "single" => Ok(HeadMode::SingleHead),
            "multi_head" | "multi" => Ok(HeadMode::MultiHead),
            _ => Err(Error::config(format!("unknown head mode '{s}'"))),
        }
    }
}

pub const DEFAULT_TRUNK: [usize; 3] = [64, 32, 1];
pub const DEFAULT_WINDOW: usize = 90;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub mode: HeadMode,
    pub head: HeadSpec,
    pub n_signals: usize,
    /// Widths of the shared dense stack. A trailing `1` is the linear output
    /// unit; without one, a linear output unit is appended.
    pub trunk_sizes: Vec<usize>,
    pub window_length: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(mode: HeadMode, head: HeadSpec, n_signals: usize) -> Self {
        ModelSpec {
            mode,
            head,
            n_signals,
            trunk_sizes: DEFAULT_TRUNK.to_vec(),
            window_length: DEFAULT_WINDOW,
            seed: 0,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = self.head.violations();
        if self.n_signals == 0 {
            errs.push("n_signals must be positive".into());
        }
        if self.window_length == 0 {
            errs.push("window_length must be positive".into());
        }
        if self.trunk_sizes.contains(&0) {
            errs.push("trunk_sizes must all be positive".into());
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

    /// Short label such as `multi_head-fnn+soft-mul_eq25`.
    /// Hidden trunk widths, excluding the linear output unit.
    pub fn trunk_hidden(&self) -> &[usize] {
        match self.trunk_sizes.split_last() {
            Some((&1, rest)) => rest,
            _ => &self.trunk_sizes,
        }
    }

    pub fn label(&self) -> String {
        let mut s = format!("{}-{}", self.mode.name(), self.head.head_type.name());
        if let Some(a) = &self.head.attention {
            s.push('+');
            s.push_str(&a.label());
        }
        s
    }
}
