//! Seed derivation for independent, reproducible random streams.
//!
//! Every Monte Carlo job (a replicate, a bootstrap refit, a generated
//! election) draws from its own stream derived from a master seed, so the
//! results do not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a stream tag and an index into a child seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream.rotate_left(17)) ^ index)
}

pub fn stream_rng(master: u64, stream: u64, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, stream, index))
}

/// Stream tags, kept distinct so no two jobs share a stream.
pub(crate) mod streams {
    pub const ELECTORATE: u64 = 1;
    pub const COUNTY: u64 = 2;
    pub const BOX: u64 = 3;
    pub const LAYOUT: u64 = 4;
    pub const MODEL_REPLICATE: u64 = 10;
    pub const BOOTSTRAP_DATA: u64 = 11;
    pub const BOOTSTRAP_FIT: u64 = 12;
    pub const CALIBRATE: u64 = 13;
    pub const SYMMETRIZE: u64 = 20;
    pub const ROUND2: u64 = 21;
}
