//! Parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type InitRng = ChaCha8Rng;

/// Uniform Glorot: `U(−l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut InitRng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape")
}
