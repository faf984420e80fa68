//! Deterministic RNG stream derivation: one master seed per run, split
//! into independent substreams by fixed tags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, tag: u64) -> u64 {
    mix(master ^ mix(tag))
}

pub fn stream(master: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag))
}

pub const TAG_INIT: u64 = 1;
pub const TAG_SAMPLER: u64 = 2;
pub const TAG_AUGMENT: u64 = 3;
pub const TAG_DATA_IDENTITY: u64 = 10;
pub const TAG_DATA_CAMERA: u64 = 11;
pub const TAG_DATA_NOISE: u64 = 12;
