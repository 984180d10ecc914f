//! Seed derivation and the small set of deterministic draws the crate needs.
//!
//! Every random quantity in a run flows from one base seed; independent
//! streams are derived by hashing a textual label into the seed. The raw
//! ChaCha output is mapped to floats by hand so the values do not depend on
//! distribution code elsewhere.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Derive a child seed from a base seed and a stream label (FNV-1a mix).
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded generator for the stream identified by `label`.
pub fn stream(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label))
}

/// Uniform draw in [0, 1) using the top 53 bits of one u64.
pub fn next_unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in [lo, hi).
pub fn next_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * next_unit(rng)
}

/// Standard normal draw (Box-Muller; one value per call, second discarded).
pub fn next_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = (next_unit(rng)).max(f64::MIN_POSITIVE);
    let u2 = next_unit(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform index in [0, n).
pub fn next_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = next_index(rng, i + 1);
        items.swap(i, j);
    }
}
