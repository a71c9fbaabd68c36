//! Multi-head and attention-augmented remaining-useful-life regression.

pub mod attention;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
