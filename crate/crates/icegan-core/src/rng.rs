//! Seeded RNG helpers. Every stochastic choice in the crate draws from a
//! ChaCha stream derived from the run seed, so runs replay bit-identically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Derives an independent stream seed from a base seed and a purpose tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = base ^ 0x517cc1b727220a95;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100000001b3).rotate_left(23);
    }
    h ^ h >> 31
}

pub fn stream(base: u64, tag: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(base, tag))
}

/// Standard normal via Box-Muller on the ChaCha stream.
pub fn normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.gen::<f64>();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| normal(rng) * std).collect()
}
