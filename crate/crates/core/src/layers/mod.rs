//! Dense, recurrent (SRNN, LSTM, GRU, BiLSTM), convolutional and
//! batch-normalization layers built on the tape.
//!
//! Every layer owns [`ParamId`](crate::tensor::ParamId)s into a shared
//! [`ParamStore`](crate::tensor::ParamStore) and records its forward pass on
//! a [`Tape`](crate::tensor::Tape). Sequences are batched `[B×T×F]`.

mod batchnorm;
mod conv;
mod dense;
pub mod init;
mod recurrent;

pub use batchnorm::BatchNormLayer;
pub use conv::{Conv1DLayer, Padding};
pub use dense::DenseLayer;
pub use recurrent::{BiLstm, CellKind, RecurrentCell};

use serde::{Deserialize, Serialize};

use crate::tensor::Unary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn unary(self) -> Unary {
        match self {
            Activation::Identity => Unary::Identity,
            Activation::Sigmoid => Unary::Sigmoid,
            Activation::Tanh => Unary::Tanh,
            Activation::Relu => Unary::Relu,
            Activation::LeakyRelu => Unary::LeakyRelu,
        }
    }
}
