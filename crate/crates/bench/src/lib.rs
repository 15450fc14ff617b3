//! Deterministic inputs shared by the benchmarks.

use dermfoundry_core::autograd::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows × cols` uniform in [-1, 1).
pub fn uniform(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = rng(seed);
    Mat::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

/// Binary labels and noisy scores correlated with them.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<bool>, Vec<f64>) {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let y: bool = r.random();
            (y, f64::from(u8::from(y)) + r.random_range(-1.0..1.0))
        })
        .unzip()
}
