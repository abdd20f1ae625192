//! Seeded randomness. Everything stochastic in the crate draws from a ChaCha8 stream
//! so runs are bitwise reproducible from a `u64` seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform sample in `[lo, hi)`.
#[inline]
pub fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Standard normal sample (Box-Muller, cosine branch only).
pub fn normal(rng: &mut SeededRng) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(core::f64::consts::TAU * u2)
}

/// Uniform integer in `[lo, hi)`.
#[inline]
pub fn index(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..hi)
}
