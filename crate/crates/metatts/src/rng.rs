//! Deterministic randomness: every random stream in the system is derived
//! from a single `u64` seed through named children, so subsystems (corpus
//! generation, parameter init, episode sampling, ...) are independently
//! reproducible and insensitive to each other's draw counts.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// 32-byte child seed: SHA-256 over the root seed (little-endian) and the
/// child name. Distinct names give statistically independent streams.
pub fn child_seed(seed: u64, name: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.finalize().into()
}

/// Deterministic RNG for a named child stream.
pub fn child_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(child_seed(seed, name))
}

/// Standard normal draw (Box-Muller, cosine branch only so each call
/// consumes exactly two uniforms).
pub fn normal(rng: &mut impl Rng) -> f64 {
    // 1 - u keeps the argument of ln strictly positive.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fills a slice with independent N(mean, std^2) draws.
pub fn fill_normal(rng: &mut impl Rng, out: &mut [f64], mean: f64, std: f64) {
    for v in out {
        *v = mean + std * normal(rng);
    }
}
