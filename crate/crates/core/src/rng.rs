//! Seeded randomness. Every stochastic choice in the crate (calibration
//! windows, rotations, weight init, synthetic corpora) draws from this
//! generator so runs are reproducible from a single `u64`.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// Xoshiro256++ seeded through SplitMix64.
pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f32> {
    (0..n).map(|_| (gaussian(rng) * std) as f32).collect()
}

/// Derives an independent stream for a named sub-task.
pub fn derive(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
