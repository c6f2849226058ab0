//! Seeding helpers and categorical sampling.
//!
//! Every stochastic operation in the crate takes an explicit `u64` seed and
//! builds its own ChaCha8 stream from it, so runs are reproducible and
//! independent operations do not share generator state.

use alloc::vec::Vec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for a seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a sub-seed for a named stage (splitmix64 over seed ^ salt).
///
/// Used to give each EM iteration, epoch or worker its own stream without
/// the streams being trivially correlated.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sample an index from an (unnormalized is fine) non-negative weight vector.
pub fn sample_categorical(rng: &mut impl Rng, weights: &[f64]) -> usize {
    debug_assert!(!weights.is_empty());
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn shuffled_indices(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<f64> = {
            let mut rng = rng_from_seed(42);
            (0..8).map(|_| rng.gen()).collect()
        };
        let b: Vec<f64> = {
            let mut rng = rng_from_seed(42);
            (0..8).map(|_| rng.gen()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn categorical_respects_point_mass() {
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            assert_eq!(sample_categorical(&mut rng, &[0.0, 1.0, 0.0]), 1);
        }
    }

    #[test]
    fn categorical_frequencies_track_weights() {
        let mut rng = rng_from_seed(7);
        let weights = [0.5, 0.3, 0.2];
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_categorical(&mut rng, &weights)] += 1;
        }
        for (c, w) in counts.iter().zip(&weights) {
            let freq = *c as f64 / n as f64;
            assert!((freq - w).abs() < 0.01, "freq {freq} vs weight {w}");
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = rng_from_seed(3);
        let mut idx = shuffled_indices(&mut rng, 100);
        idx.sort_unstable();
        assert_eq!(idx, (0..100).collect::<Vec<_>>());
    }
}
