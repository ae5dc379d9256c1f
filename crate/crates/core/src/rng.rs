//! Per-item random streams.
//!
//! Every random decision in the pipeline comes from a stream keyed by a base
//! seed plus a short path of integers (item index, view, stage). Streams are
//! independent of evaluation order, so parallel workers reproduce the serial
//! result exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stage tags mixed into stream keys.
pub mod stage {
    pub const GLOBAL: u64 = 0x676c_6f62;
    pub const LOCAL: u64 = 0x6c6f_6361;
    pub const CROP: u64 = 0x6372_6f70;
    pub const PLAN: u64 = 0x706c_616e;
    pub const INIT: u64 = 0x696e_6974;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes `seed` and `path` into a single 64-bit key.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |h, &p| splitmix64(h ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_key(seed, path))
}
