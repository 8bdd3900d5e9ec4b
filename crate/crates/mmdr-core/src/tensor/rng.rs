//! Seeded randomness: one stream drives parameter init, sampling, and data
//! generation so a fixed seed reproduces runs bit for bit.

use crate::tensor::Matrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Seed newtype carried through configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn stream(&self) -> SeededRng {
        SeededRng::new(self.0)
    }

    /// Derive an independent child seed from labels, e.g. per sample.
    pub fn derive(&self, labels: &[u64]) -> RngSeed {
        // splitmix64-style mixing keeps derivation order-independent.
        let mut z = self.0;
        for &l in labels {
            z = z.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(l.wrapping_mul(0xbf58476d1ce4e5b9));
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^= z >> 31;
        }
        RngSeed(z)
    }
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn unit(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        // Box-Muller; two uniforms per draw keeps the stream simple.
        let u1: f64 = self.inner.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = self.inner.gen();
        mean + std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn range(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen::<f64>() < p
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        // Fisher-Yates with our own stream for reproducibility.
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }

    /// Init matrix with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init_matrix(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = self.uniform(-bound, bound);
        }
        m
    }
}
