//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng`
//! seeded from a parent seed and a path of integer labels, so that work
//! items can be generated in any order (or in parallel) and still replay
//! bit-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `labels` into `seed`. Distinct label paths give unrelated seeds.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn stream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}

/// Labels used to keep the streams of different subsystems apart.
pub mod label {
    pub const POSE: u64 = 1;
    pub const LIGHTING: u64 = 2;
    pub const PIXEL: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const APPEARANCE: u64 = 7;
    pub const TEXTURE: u64 = 8;
    pub const BACKGROUND: u64 = 9;
    pub const RENDER: u64 = 10;
    pub const ALBEDO: u64 = 11;
    pub const SHUFFLE: u64 = 12;
}
