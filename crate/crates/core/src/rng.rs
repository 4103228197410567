//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from a
//! seed and a fixed stream id, so adding draws in one place never shifts the
//! sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn stream(seed: u64, stream_id: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

// Stream ids. Client streams are offset by the client id.
pub(crate) const STREAM_SHIFT_MAP: u64 = 1;
pub(crate) const STREAM_SOURCE_PROTOTYPES: u64 = 2;
pub(crate) const STREAM_TARGET_PROTOTYPES: u64 = 3;
pub(crate) const STREAM_SOURCE_NOISE: u64 = 4;
pub(crate) const STREAM_TARGET_NOISE: u64 = 5;
pub(crate) const STREAM_SOURCE_PAIRS: u64 = 6;
pub(crate) const STREAM_TARGET_PAIRS: u64 = 7;
pub(crate) const STREAM_MODEL_INIT: u64 = 16;
pub(crate) const STREAM_TRAIN_ORDER: u64 = 17;
pub(crate) const STREAM_KMEANS: u64 = 18;
pub(crate) const STREAM_HEAD_INIT_BASE: u64 = 1 << 20;
pub(crate) const STREAM_CLIENT_BASE: u64 = 1 << 32;
