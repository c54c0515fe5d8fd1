//! Seeded randomness with reproducible, order-independent substreams.
//!
//! Every random decision in the crate flows through [`Rng`], a thin wrapper
//! around the ChaCha8 stream cipher generator. ChaCha8 is a counter-based
//! design with a fixed cross-platform output stream, so a 64-bit seed fully
//! determines every draw regardless of OS or architecture.
//!
//! Parallel work (per-sample forwards, per-unit dropout) never shares a
//! stream: callers derive independent child generators with [`Rng::derive`],
//! which mixes integer tags into the seed. Derivation depends only on the
//! seed and the tags, never on how much of the parent stream was consumed,
//! so the set of streams a run uses is independent of execution order.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Name recorded in run metadata so reports identify the generator.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Deterministic seeded generator. Cloning is intentionally not provided;
/// derive child streams instead of duplicating a stream position.
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Seed this generator was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator keyed by `tags`. Children with distinct tag sequences
    /// are statistically independent; the parent stream is untouched.
    pub fn derive(&self, tags: &[u64]) -> Rng {
        let mut s = self.seed;
        for &t in tags {
            s = splitmix64(s ^ splitmix64(t));
        }
        Rng::from_seed(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    /// Gaussian draw. `sigma` must be finite and nonnegative.
    pub fn normal(&mut self, mean: f64, sigma: f64) -> f64 {
        Normal::new(mean, sigma)
            .expect("valid normal parameters")
            .sample(&mut self.inner)
    }

    /// True with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random_range(0.0..1.0) < p
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }
}

/// Stream tags; keeps call sites collision-free and greppable.
pub mod streams {
    pub const PARAM_INIT: u64 = 1;
    pub const DATA_TABLES: u64 = 2;
    pub const DATA_TRAIN: u64 = 3;
    pub const DATA_VAL: u64 = 4;
    pub const EPOCH_SHUFFLE: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const GRAD_CHECK: u64 = 7;
    pub const DROPOUT_REDUCE: u64 = 8;
}
