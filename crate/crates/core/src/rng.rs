//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a `u64` that is itself derived from the run seed and a few
//! integer coordinates, so streams do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from a parent seed and a list of coordinates.
pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(mix64(seed), |acc, &c| mix64(acc ^ mix64(c.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn rng_from(seed: u64, coords: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, coords))
}

pub fn standard_normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Domain tags for [`derive_seed`] so that streams used for different
/// purposes never collide.
pub mod stream {
    pub const INIT_BETA: u64 = 1;
    pub const INIT_HEAD: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const TRAIN_EPS: u64 = 4;
    pub const VAL_EPS: u64 = 5;
    pub const PREDICT_EPS: u64 = 6;
    pub const DATA: u64 = 7;
    pub const SPLIT: u64 = 8;
}
