//! Seedable randomness with purpose-specific sub-streams.
//!
//! A sub-stream seed is `mix(seed, stream)`, where `mix` is two rounds of the
//! SplitMix64 finalizer. Deriving a stream never advances the parent, so the
//! draws of one stream do not depend on how much another stream consumed.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

/// Well-known stream identifiers.
pub mod stream {
    pub const INIT: u64 = 0x1;
    pub const SHUFFLE: u64 = 0x2;
    pub const LATENT: u64 = 0x3;
    pub const SYNTH: u64 = 0x4;
    pub const VALIDATION: u64 = 0x5;
    pub const EVALUATION: u64 = 0x6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sub-stream `stream` under `seed`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

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

    /// Independent generator for `stream`, derived from this generator's seed.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::new(sub_seed(self.seed, stream))
    }

    /// Derives along a path of stream ids, e.g. `[LATENT, epoch, day]`.
    pub fn derive_path(&self, path: &[u64]) -> Rng {
        let seed = path.iter().fold(self.seed, |s, &p| sub_seed(s, p));
        Rng::new(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn normal_tensor(&mut self, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, self.normal_vec(rows * cols))
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}
