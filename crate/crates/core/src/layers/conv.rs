use serde::{Deserialize, Serialize};

use super::init::{glorot, InitRng};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding.
    None,
    /// Zero padding so that the output length is `ceil(L / stride)`; any
    /// odd padding element goes on the right.
    Same,
}

/// 1-D convolution (cross-correlation, no kernel flip).
///
/// Output channel `k` is `b_k + Σ_i (w_ik ⋆ s_i)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv1DLayer {
    /// `[C_out×C_in×K]`
    pub kernels: ParamId,
    /// `[C_out]`
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv1DLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_width: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        let fan_in = in_channels * kernel_width;
        let fan_out = out_channels * kernel_width;
        let kernels = store.add(
            format!("{name}.kernels"),
            ParamKind::Weight,
            glorot(rng, &[out_channels, in_channels, kernel_width], fan_in, fan_out),
        );
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[out_channels]));
        Conv1DLayer {
            kernels,
            bias,
            in_channels,
            out_channels,
            kernel_width,
            stride,
            padding,
        }
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        kernels: Tensor,
        bias: Tensor,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (o, i, k) = match kernels.shape() {
            [o, i, k] => (*o, *i, *k),
            s => return Err(Error::dim(format!("kernels must be [C_out×C_in×K], got {s:?}"))),
        };
        if bias.shape() != [o] {
            return Err(Error::dim(format!("conv bias {:?}, expected [{o}]", bias.shape())));
        }
        if stride == 0 {
            return Err(Error::config("conv stride must be positive"));
        }
        Ok(Conv1DLayer {
            kernels: store.add(format!("{name}.kernels"), ParamKind::Weight, kernels),
            bias: store.add(format!("{name}.bias"), ParamKind::Bias, bias),
            in_channels: i,
            out_channels: o,
            kernel_width: k,
            stride,
            padding,
        })
    }

    /// `(pad_left, pad_right, out_len)` for an input of length `len`.
    pub fn geometry(&self, len: usize) -> Result<(usize, usize, usize)> {
        let (k, s) = (self.kernel_width, self.stride);
        match self.padding {
            Padding::None => {
                if len < k {
                    return Err(Error::dim(format!(
                        "sequence of length {len} is shorter than kernel width {k}"
                    )));
                }
                Ok((0, 0, (len - k) / s + 1))
            }
            Padding::Same => {
                let out = len.div_ceil(s);
                let total = ((out - 1) * s + k).saturating_sub(len);
                Ok((total / 2, total - total / 2, out))
            }
        }
    }

    /// Channels-last forward: `[B×L×C_in] → [B×L_out×C_out]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.in_channels {
            return Err(Error::dim(format!(
                "conv1d expects [B×L×{}] input, got {s:?}",
                self.in_channels
            )));
        }
        let (pad_left, _, out_len) = self.geometry(s[1])?;
        let w = tape.param(store, self.kernels);
        let b = tape.param(store, self.bias);
        tape.conv1d(x, w, b, self.stride, pad_left, out_len)
    }

    /// Channels-first forward of one sequence: `[C_in×L] → [C_out×L_out]`.
    pub fn forward_seq(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<Var> {
        let s = tape.shape(seq).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("expected [C_in×L], got {s:?}")));
        }
        let t = tape.transpose(seq)?;
        let t = tape.reshape(t, &[1, s[1], s[0]])?;
        let y = self.forward(tape, store, t)?;
        let (l_out, c_out) = (tape.shape(y)[1], tape.shape(y)[2]);
        let y = tape.reshape(y, &[l_out, c_out])?;
        tape.transpose(y)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.kernels, self.bias]
    }
}
