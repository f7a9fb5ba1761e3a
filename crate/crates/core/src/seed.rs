//! Deterministic seed derivation.
//!
//! Every random stream in a run is keyed by the run seed plus a short path of
//! integers (epoch, task, sample index, ...). Streams never depend on how many
//! values another stream consumed, so a single-task run reproduces the same
//! task branch of a multi-task run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream tags, so that unrelated consumers never share a path prefix.
pub mod stream {
    pub const ENCODER_INIT: u64 = 1;
    pub const HEADER_INIT: u64 = 2;
    pub const TASK_ORDER: u64 = 3;
    pub const BATCH_ORDER: u64 = 4;
    pub const PRETEXT: u64 = 5;
    pub const DATASET: u64 = 6;
    pub const PERMUTATIONS: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const TRANSFER: u64 = 9;
    pub const KMEANS: u64 = 10;
    pub const SPLIT: u64 = 11;
}
