//! Input fixtures shared by the benchmarks.

use binas_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[-1, 1)` from a fixed seed.
pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Typical convolution sizes of a small cell network: `(batch, channels, side)`.
pub const CONV_CASES: &[(usize, usize, usize)] = &[(32, 16, 14), (32, 64, 7)];
