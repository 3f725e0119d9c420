//! Seeded random source used everywhere randomness appears.
//!
//! The generator is ChaCha8 keyed from a `u64` seed (or a full 32-byte key
//! for the pseudo-embedder), so the same seed produces the same stream on
//! every platform. Nothing in the crate draws from OS entropy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct Prng(ChaCha8Rng);

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_key(key: [u8; 32]) -> Self {
        Prng(ChaCha8Rng::from_seed(key))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.gen_range(lo..hi)
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.0);
    }

    /// Draw an index proportionally to `weights` (non-negative, not all zero).
    /// Ties at the boundary resolve to the earlier index, which keeps the
    /// draw deterministic for a given seed.
    pub fn sample_weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0, "sample_weighted needs positive mass");
        let mut u = self.uniform(0.0, total);
        for (i, &w) in weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                return i;
            }
        }
        // Guard against accumulated rounding: fall back to the last
        // positive-weight entry.
        weights
            .iter()
            .rposition(|&w| w > 0.0)
            .unwrap_or(weights.len() - 1)
    }
}
