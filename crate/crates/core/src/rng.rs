//! Counter-based Gaussian sampling.
//!
//! Every random draw in this crate is indexed: sample `i` of a stream is
//! a pure function of `(seed, i)`, with SplitMix64 as the bit mixer and
//! Box-Muller for the normal transform. Indexed draws make generation
//! order irrelevant, so seeded outputs are reproducible across runs,
//! thread counts, and call sites.

use std::f64::consts::TAU;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer (Steele, Lea & Flood 2014). Bijective on `u64`.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A stateless, seeded, counter-indexed generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Derives an independent child stream. Mixing the label through
    /// SplitMix64 keeps sibling streams (stage noise, weight init,
    /// batch sampling) decorrelated even for adjacent labels.
    pub fn derive(&self, label: u64) -> Self {
        Self {
            seed: splitmix64(self.seed ^ splitmix64(label)),
        }
    }

    /// Raw 64 mixed bits for counter `i`.
    pub fn raw(&self, i: u64) -> u64 {
        splitmix64(self.seed.wrapping_add(splitmix64(i)))
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform(&self, i: u64) -> f64 {
        // 53 mantissa bits, offset by half an ulp so 0 and 1 are excluded.
        ((self.raw(i) >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Uniform draw in (-bound, bound).
    pub fn uniform_symmetric(&self, i: u64, bound: f64) -> f64 {
        (2.0 * self.uniform(i) - 1.0) * bound
    }

    /// Standard normal draw for counter `i` via Box-Muller.
    ///
    /// Consumes uniforms `2i` and `2i + 1`; only the cosine branch is
    /// used so that one counter maps to exactly one normal.
    pub fn normal(&self, i: u64) -> f64 {
        let u1 = self.uniform(2 * i);
        let u2 = self.uniform(2 * i + 1);
        (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
    }

    /// `n` standard normals at counters `0..n`.
    pub fn normal_vec(&self, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.normal(i as u64)).collect()
    }
}

/// Stable 64-bit FNV-1a hash of a string, used to key prompt embeddings.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
