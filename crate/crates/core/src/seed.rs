//! Seed derivation. Every random stream is keyed by a label hashed together
//! with the run seed, so adding a consumer never shifts an existing stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Sub-seed for the stream named `label` under the run seed `seed`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(label.as_bytes())))
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Counter-based uniform sample in `[0, 1)` keyed by four words.
pub fn keyed_uniform(seed: u64, step: u64, site: u64, index: u64) -> f64 {
    let h = splitmix64(splitmix64(splitmix64(seed ^ step.rotate_left(17)) ^ site) ^ index);
    (h >> 11) as f64 / (1u64 << 53) as f64
}
