//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` seeded rows of `d` standard-uniform values centered on zero.
pub fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random::<f32>() - 0.5).collect()).collect()
}

/// Same as [`random_rows`] in double precision.
pub fn random_rows_f64(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    random_rows(n, d, seed).into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect()
}
