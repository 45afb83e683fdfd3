//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the master seed and selected
//! by a 64-bit stream id, so each (run, episode) pair has its own independent
//! and reproducible sequence regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// A stream derived from `seed`, selected by `stream`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for a (run, purpose, index) triple.
pub fn stream_id(run: u64, purpose: u64, index: u64) -> u64 {
    splitmix(splitmix(run ^ 0x9e37_79b9_7f4a_7c15).wrapping_add(purpose) ^ index.rotate_left(17))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
