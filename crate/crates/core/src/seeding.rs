//! Independent, reproducible random streams derived from one global seed.
//!
//! Each consumer (a client in a given round, a probe fold, ...) gets its own
//! ChaCha stream keyed by a tuple of tags, so results never depend on the
//! order in which parallel work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod tag {
    pub const TEMPLATES: u64 = 1;
    pub const SUBJECT: u64 = 2;
    pub const SLICE_NOISE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const CLIENT_ROUND: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const SITE: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
