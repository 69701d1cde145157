//! Deterministic random number generation.
//!
//! All stochastic behavior in the crate flows through [`SplitRng`]: a
//! ChaCha8 generator seeded from a base seed plus a component label, so each
//! consumer (box sampling, radar noise, clutter, parameter init, ...) draws
//! from an independent stream. Adding draws to one component never perturbs
//! another.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a hash; also used for config/manifest fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Label-split deterministic RNG.
pub struct SplitRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SplitRng {
    pub fn new(seed: u64, label: &str) -> SplitRng {
        let mixed = splitmix64(seed ^ fnv1a64(label.as_bytes()));
        SplitRng { inner: ChaCha8Rng::seed_from_u64(mixed), spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn range_usize(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(hi >= lo);
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as usize
    }

    /// Standard normal via Box-Muller; the paired value is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        // u1 in (0, 1] avoids ln(0)
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Zero-mean normal with the given standard deviation.
    pub fn normal_scaled(&mut self, sigma: f64) -> f64 {
        sigma * self.normal()
    }
}

/// Derive a child seed from a parent seed and a label; used to give every
/// scene and every parameter tensor its own stream.
pub fn split_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(label.as_bytes()))
}
