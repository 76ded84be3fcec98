//! Counter-based deterministic random stream with labeled splitting.
//!
//! Each draw is a pure function of (seed, counter), so identical seeds
//! reproduce bit-identical sequences on any platform. `split(label)`
//! derives a child stream from (seed, label) only, independent of how many
//! draws the parent has consumed; pre-splitting one stream per work item
//! makes parallel evaluation order-independent.

use crate::error::{Error, Result};
use crate::numcore::vector::RealVector;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: full-avalanche mix of a 64-bit word.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes, used to turn string labels into split labels.
#[inline]
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Deterministic splittable random stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RandomStream {
    seed: u64,
    counter: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Child stream determined by (seed, label) alone.
    pub fn split(&self, label: u64) -> RandomStream {
        let child = mix64(self.seed ^ mix64(label.wrapping_add(GOLDEN_GAMMA)));
        RandomStream {
            seed: child,
            counter: 0,
        }
    }

    /// Convenience split keyed by a string label.
    pub fn split_str(&self, label: &str) -> RandomStream {
        self.split(fnv1a64(label.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) / DEN
    }

    /// Uniform integer in [0, n). Modulo bias is negligible for the small n
    /// used here (population indices) and keeps the draw count fixed.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below: n must be positive");
        self.next_u64() % n
    }

    /// Uniform scalar in [lo, hi]; exact at lo == hi.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Vector of i.i.d. uniform draws in [lo, hi], advancing the stream by
    /// `dim` draws in index order.
    pub fn uniform_vector(&mut self, dim: usize, lo: f64, hi: f64) -> Result<RealVector> {
        if lo > hi {
            return Err(Error::config(
                "uniform_vector",
                format!("lo ({lo}) must not exceed hi ({hi})"),
            ));
        }
        let data: Vec<f64> = (0..dim).map(|_| self.uniform(lo, hi)).collect();
        RealVector::from_vec(data)
    }
}
