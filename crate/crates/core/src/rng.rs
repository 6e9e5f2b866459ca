//! Seed derivation for reproducible sub-streams.
//!
//! Every random decision in the library (weight init, shuffles, dropout
//! masks, augmentation draws) uses a ChaCha8 stream whose seed is derived
//! from a user seed plus a purpose tag and loop coordinates. Two runs with
//! the same seed therefore replay the exact same randomness regardless of
//! batch timing or platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT: u64 = 0x01;
pub const TAG_SHUFFLE: u64 = 0x02;
pub const TAG_DROPOUT: u64 = 0x03;
pub const TAG_AUGMENT: u64 = 0x04;
pub const TAG_SPLIT: u64 = 0x05;

/// SplitMix64 finalizer. Bijective on u64, good avalanche.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a seed with a purpose tag and two coordinates into one sub-seed.
pub fn mix(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut acc = splitmix(seed ^ splitmix(tag));
    acc = splitmix(acc ^ splitmix(a));
    splitmix(acc ^ splitmix(b))
}

/// ChaCha8 stream for `(seed, tag, a, b)`.
pub fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag, a, b))
}
