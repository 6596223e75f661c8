//! Schedule-independent seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a master seed with a path of indices (stream tag, episode index, ...).
/// Distinct paths give statistically independent seeds.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags so that different consumers of one master seed never collide.
pub mod stream {
    pub const EPISODE: u64 = 1;
    pub const HDV_WEIGHTS: u64 = 2;
    pub const CAV_WEIGHTS: u64 = 3;
    pub const INITIAL: u64 = 4;
    pub const INIT_PARAMS: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
}
