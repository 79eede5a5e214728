//! Shared fixtures for the benchmark targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chn_core::hashing::HashCodeMatrix;
use chn_core::losses::SimilaritySet;
use chn_core::Matrix;

/// `n` random codes of `bits` bits.
pub fn random_codes(n: usize, bits: usize, seed: u64) -> HashCodeMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codes = HashCodeMatrix::new(n, bits).unwrap();
    for i in 0..n {
        for j in 0..bits {
            codes.set_bit(i, j, rng.random::<bool>());
        }
    }
    codes
}

/// Random embeddings in (-1, 1) with entries bounded away from zero so the
/// loss kernels never hit their norm guards.
pub fn random_embeddings(rows: usize, bits: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(rows, bits);
    for v in m.as_mut_slice() {
        let x: f64 = rng.random_range(0.05..0.95);
        *v = if rng.random::<bool>() { x } else { -x };
    }
    m
}

/// `count` distinct labeled pairs over `rows` items.
pub fn random_pairs(rows: usize, count: usize, seed: u64) -> SimilaritySet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        let a = rng.random_range(0..rows);
        let b = rng.random_range(0..rows);
        if a == b {
            continue;
        }
        let (i, j) = (a.min(b), a.max(b));
        if !seen.insert((i, j)) {
            continue;
        }
        pairs.push((i, j, if rng.random::<bool>() { 1 } else { -1 }));
    }
    SimilaritySet::new(pairs).unwrap()
}
