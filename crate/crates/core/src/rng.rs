//! Seeded randomness.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! `u64` via [`rand::SeedableRng::seed_from_u64`]. Shuffles use an explicit
//! Fisher-Yates pass drawing `u64` indices so results do not depend on the
//! platform's pointer width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `values` into `seed` one SplitMix64 round per value.
pub fn mix_seed(seed: u64, values: &[u64]) -> u64 {
    values
        .iter()
        .fold(splitmix64(seed), |h, &v| splitmix64(h ^ splitmix64(v).rotate_left(17)))
}

pub fn shuffle<E>(items: &mut [E], rng: &mut SeededRng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        items.swap(i, j);
    }
}

pub fn uniform<T: Scalar>(rng: &mut SeededRng, low: f64, high: f64) -> T {
    let u: f64 = rng.random();
    T::from_f64_lossy(low + (high - low) * u)
}

pub fn standard_normal<T: Scalar>(rng: &mut SeededRng) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::from_f64_lossy(z)
}

pub fn index(rng: &mut SeededRng, len: usize) -> usize {
    rng.random_range(0..len as u64) as usize
}
