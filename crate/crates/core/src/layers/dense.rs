use serde::{Deserialize, Serialize};

use super::init::{glorot, InitRng};
use super::Activation;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

/// Fully connected layer `y = act(x·W + b)`.
///
/// Accepts `[B×in]`, or `[B×T×in]` applied independently at every timestep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            ParamKind::Weight,
            glorot(rng, &[in_dim, out_dim], in_dim, out_dim),
        );
        let b = store.add(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[out_dim]));
        DenseLayer {
            w,
            b,
            activation,
            in_dim,
            out_dim,
        }
    }

    /// Layer with explicit weights `w: [in×out]` and bias `b: [out]`.
    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        w: Tensor,
        b: Tensor,
        activation: Activation,
    ) -> Result<Self> {
        let (in_dim, out_dim) = match w.shape() {
            [i, o] => (*i, *o),
            s => return Err(Error::dim(format!("dense weight must be 2-D, got {s:?}"))),
        };
        if b.shape() != [out_dim] {
            return Err(Error::dim(format!(
                "dense bias shape {:?}, expected [{out_dim}]",
                b.shape()
            )));
        }
        Ok(DenseLayer {
            w: store.add(format!("{name}.w"), ParamKind::Weight, w),
            b: store.add(format!("{name}.b"), ParamKind::Bias, b),
            activation,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) || !(2..=3).contains(&shape.len()) {
            return Err(Error::dim(format!(
                "dense layer expects [.., {}] input, got {shape:?}",
                self.in_dim
            )));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, &[rows, self.in_dim])?
        };
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let z = tape.matmul(flat, w)?;
        let z = tape.add(z, b)?;
        let y = match self.activation {
            Activation::Identity => z,
            a => tape.unary(a.unary(), z)?,
        };
        if shape.len() == 2 {
            Ok(y)
        } else {
            tape.reshape(y, &[shape[0], shape[1], self.out_dim])
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}
