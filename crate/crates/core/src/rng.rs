//! Seed derivation for independent, reproducible random streams.
//!
//! Every consumer of randomness (data generation, partitioning, client
//! selection, each client's local training) draws from its own ChaCha stream
//! keyed by the experiment seed plus a tag path. Results therefore do not
//! depend on the order in which streams are created or consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags. Values are arbitrary but frozen: changing one changes every
/// downstream result for that stream.
pub mod tag {
    pub const CLASS_CENTERS: u64 = 0x01;
    pub const SAMPLES: u64 = 0x02;
    pub const LONGTAIL: u64 = 0x03;
    pub const CLASS_ASSIGNMENT: u64 = 0x04;
    pub const CLASS_SHARDS: u64 = 0x05;
    pub const STAGE_SPLIT: u64 = 0x06;
    pub const MODEL_INIT: u64 = 0x07;
    pub const CLIENT_SELECTION: u64 = 0x08;
    pub const LOCAL_TRAINING: u64 = 0x09;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of tags into a single 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, path))
}
