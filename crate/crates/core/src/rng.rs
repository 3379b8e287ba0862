//! Seed streams. Every random draw in the crate comes from a root seed
//! split into named, independent ChaCha streams so that data sampling,
//! initialization and dropout can be varied separately.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Dropout,
    RelationDropout,
    Sampling,
    Shuffle,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Dropout => 3,
            Stream::RelationDropout => 4,
            Stream::Sampling => 5,
            Stream::Shuffle => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Stream keyed by a name, used for per-parameter initialization so that a
/// parameter's initial value does not depend on which other parameters exist.
pub fn named_stream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a; stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17));
    rng.set_stream(Stream::Init.id());
    rng
}
