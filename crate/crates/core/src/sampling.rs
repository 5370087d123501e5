//! Seeded input samplers shared by the audits and the empirical checks.
//!
//! All randomness comes from [`SeededRng`] (ChaCha8 seeded with a `u64`), so
//! a seed reproduces a run exactly on any platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere randomness is needed.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Source of input vectors for sampling-based checks.
pub trait InputSampler: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut SeededRng) -> Vec<f64>;
}

/// Uniform draws from the box `[lo, hi]^dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformBox {
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
}

impl UniformBox {
    pub fn new(dim: usize, lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "UniformBox: lo must not exceed hi");
        UniformBox { dim, lo, hi }
    }
}

impl InputSampler for UniformBox {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        if self.lo == self.hi {
            return vec![self.lo; self.dim];
        }
        (0..self.dim).map(|_| rng.random_range(self.lo..self.hi)).collect()
    }
}

/// Constant vectors `c·1` with `c` uniform in `[lo, hi]`, e.g. step inputs
/// on a fixed time grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantLevels {
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
}

impl InputSampler for ConstantLevels {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        let c = if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..self.hi)
        };
        vec![c; self.dim]
    }
}

/// Draws `count` input pairs sequentially so the set depends on the seed only.
pub fn sample_pairs(
    sampler: &dyn InputSampler,
    count: usize,
    rng: &mut SeededRng,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..count)
        .map(|_| (sampler.sample(rng), sampler.sample(rng)))
        .collect()
}
