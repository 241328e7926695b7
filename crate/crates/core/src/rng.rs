//! Seeded random number generation.
//!
//! Every stochastic component takes an explicit [`Rng`]; there is no global
//! generator. The stream is ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded from a
//! single `u64`, so a seed fully determines every draw on every platform.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`. Panics when `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Per-purpose seeds derived from one top-level seed.
///
/// `data = seed + 1`, `init = seed + 2`, `dropout = seed + 3`,
/// `shuffle = seed + 4`, `validation = seed + 5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan(pub u64);

impl SeedPlan {
    pub fn data(self) -> u64 {
        self.0.wrapping_add(1)
    }
    pub fn init(self) -> u64 {
        self.0.wrapping_add(2)
    }
    pub fn dropout(self) -> u64 {
        self.0.wrapping_add(3)
    }
    pub fn shuffle(self) -> u64 {
        self.0.wrapping_add(4)
    }
    pub fn validation(self) -> u64 {
        self.0.wrapping_add(5)
    }
}
