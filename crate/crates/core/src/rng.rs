//! Deterministic random number generation.
//!
//! A thin wrapper around ChaCha8 that produces identical streams on every
//! platform and exposes its full state for bit-exact checkpointing. Normal
//! samples use one Box-Muller evaluation per draw (no cached spare) so the
//! state is exactly the counter position of the underlying stream.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: [u8; 32],
}

/// Serializable snapshot of an [`Rng`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&seed.to_le_bytes());
        Rng {
            inner: ChaCha8Rng::from_seed(bytes),
            seed: bytes,
        }
    }

    /// Derive an independent generator (distinct ChaCha stream).
    pub fn fork(&self, stream: u64) -> Self {
        let mut rng = Rng {
            inner: ChaCha8Rng::from_seed(self.seed),
            seed: self.seed,
        };
        rng.inner.set_stream(stream);
        rng
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
            stream: self.inner.get_stream(),
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng {
            inner,
            seed: state.seed,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in the half-open interval [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform draw in the open interval (0, 1); never returns 0.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Standard normal via Box-Muller. Consumes two uniforms per draw.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_with(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection sampling to avoid modulo bias.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}
