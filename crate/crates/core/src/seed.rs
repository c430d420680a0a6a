//! Seed splitting. Every random stream in a run is derived from the single
//! run seed and a path of integer tags, so streams never overlap and can be
//! drawn in any order or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags.
pub mod tag {
    pub const PROTOTYPES: u64 = 1;
    pub const TEXT: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const OCCLUSION: u64 = 4;
    pub const FLIP: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `path` into `seed`.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}
