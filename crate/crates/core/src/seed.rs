//! Deterministic seed derivation. Every random stream is keyed by a master
//! seed plus a path of indices, so results do not depend on the order in
//! which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix `path` into `seed`.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

/// Stream tags used under a replicate seed.
pub mod stream {
    pub const MATRICES: u64 = 1;
    pub const OGM: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const CONTAMINATION: u64 = 4;
    pub const CV: u64 = 5;
    pub const FIT: u64 = 6;
}
