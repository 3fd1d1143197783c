//! Seeded random streams.
//!
//! Every stochastic operation draws from its own ChaCha stream, keyed by the
//! run seed plus a purpose tag and counters, so results do not depend on how
//! many draws earlier operations made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_EPSILON: u64 = 2;
pub const STREAM_DROPOUT: u64 = 3;
pub const STREAM_SHUFFLE: u64 = 4;
pub const STREAM_SAMPLE: u64 = 5;
pub const STREAM_CORPUS: u64 = 6;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a seed with any number of stream keys.
pub fn mix(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, keys))
}
