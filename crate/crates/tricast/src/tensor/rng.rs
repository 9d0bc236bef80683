//! Deterministic random streams.
//!
//! Every source of randomness in the crate (weight initialization, dropout
//! masks, sampling noise, batch shuffling) draws from an [`RngStream`], a
//! seeded ChaCha12 generator. Identical seeds produce identical draw
//! sequences across runs and platforms, which is what makes training
//! trajectories reproducible. Streams are derived from a parent seed by
//! label so that independent consumers (one per model, and within a model
//! one per purpose) never share or reorder draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use super::Tensor;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha12Rng,
}

const ALGORITHM: &str = "chacha12";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        RngStream { seed, rng: ChaCha12Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        ALGORITHM
    }

    /// Derives an independent child stream from this stream's *seed* (not
    /// its current position), so derivation order never affects draws.
    pub fn derive(&self, label: &str) -> RngStream {
        RngStream::from_seed(splitmix64(self.seed ^ fnv1a(label.as_bytes())))
    }

    /// Uniform draw from `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.standard_normal();
        }
    }

    /// Glorot/Xavier uniform initialization: `U(-a, a)` with
    /// `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier_uniform(&mut self, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| self.uniform(-a, a)).collect();
        Tensor::new(shape, data).expect("shape/product consistency").trainable()
    }

    /// Inverted-dropout mask: each entry is 0 with probability `rate` and
    /// `1/(1-rate)` otherwise.
    pub fn dropout_mask(&mut self, len: usize, rate: f64) -> Vec<f64> {
        debug_assert!((0.0..1.0).contains(&rate));
        let keep_scale = 1.0 / (1.0 - rate);
        (0..len).map(|_| if self.next_f64() < rate { 0.0 } else { keep_scale }).collect()
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            xs.swap(i, j);
        }
    }
}
