//! Named, order-independent RNG substreams.
//!
//! Every random draw in the pipeline comes from a ChaCha8 stream whose seed is
//! a hash of `(root seed, purpose tag, indices...)`, so results never depend on
//! the order in which views or nodes are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod tag {
    pub const BATCH_PLAN: u64 = 0x5041_4e;
    pub const NEIGHBORS: u64 = 0x4e45_4947;
    pub const DROPOUT: u64 = 0x4452_4f50;
    pub const INIT: u64 = 0x494e_4954;
    pub const EPOCH: u64 = 0x4550_4f43;
    pub const EVAL: u64 = 0x4556_414c;
    pub const SYNTH: u64 = 0x5359_4e54;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a path of tags.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn substream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
