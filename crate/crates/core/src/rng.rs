//! Seed derivation and Gaussian sampling.
//!
//! All randomness flows from `u64` seeds. A child seed is derived from a
//! parent and an index with a SplitMix64 mix, so any stream can be recreated
//! without replaying its siblings. Streams are ChaCha8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed number `index` of `seed`.
pub fn split(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index))
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` i.i.d. standard normal draws from the stream seeded with `seed`.
pub fn gaussian(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = stream(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitting_is_deterministic_and_distinct() {
        assert_eq!(split(7, 3), split(7, 3));
        let children: std::collections::HashSet<u64> = (0..1000).map(|i| split(7, i)).collect();
        assert_eq!(children.len(), 1000);
        assert_ne!(split(7, 0), split(8, 0));
    }

    #[test]
    fn gaussian_moments() {
        let n = 100_000;
        let xs = gaussian(42, n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
