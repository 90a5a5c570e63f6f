//! Deterministic RNG substream derivation.
//!
//! Every stochastic stage of the pipeline draws from its own ChaCha stream,
//! keyed by a master seed plus a stage tag and up to two indices (iteration,
//! particle, dataset, ...). Parallel and serial execution therefore consume
//! exactly the same random numbers, which is what makes runs bit-identical
//! regardless of the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags. Fixed values: changing them changes every seeded result.
pub mod stage {
    pub const INIT: u64 = 0x01;
    pub const MOVE: u64 = 0x02;
    pub const RESAMPLE: u64 = 0x03;
    pub const SIM_SOURCES: u64 = 0x10;
    pub const SIM_NOISE: u64 = 0x11;
    pub const SIM_SNR: u64 = 0x12;
    pub const SYNTH_LEADFIELD: u64 = 0x20;
    pub const EVAL_CELL: u64 = 0x30;
    pub const DATASET: u64 = 0x31;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a stage tag and two indices into a fresh sub-seed.
pub fn derive_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut s = splitmix64(master);
    s = splitmix64(s ^ tag);
    s = splitmix64(s ^ a);
    splitmix64(s ^ b)
}

/// A generator for the substream identified by `(master, tag, a, b)`.
pub fn substream(master: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, a, b))
}
