//! Shared inputs for the benchmarks.

use kavi_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal batch of `n` rows by `d` columns.
pub fn batch(n: usize, d: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, d], &mut rng(seed))
}
