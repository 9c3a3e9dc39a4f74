//! Seeded, splittable random streams and Bernoulli masks.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;

/// Independent ChaCha stream `stream` under `seed`. Different stream ids never
/// overlap, so parallel shards and separate uses (init, shuffling, masks) stay
/// reproducible.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mask with entries 1 (kept, probability `keep_prob`) or 0 (dropped), drawn
/// row-major.
pub fn keep_mask<R: RngCore + ?Sized>(rows: usize, cols: usize, keep_prob: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < keep_prob {
            1.0
        } else {
            0.0
        }
    })
}

/// Uniform matrix on `[-bound, bound)`.
pub fn uniform<R: RngCore + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * bound)
}
