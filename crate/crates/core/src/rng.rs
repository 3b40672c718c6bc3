//! Named random sub-streams derived from one master seed.
//!
//! Every consumer of randomness gets its own ChaCha stream so that, for
//! example, changing the mixer mode never shifts the patches that get sampled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Scene,
    Sampling,
    Init,
    Mixer,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Scene => 1,
            Stream::Sampling => 2,
            Stream::Init => 3,
            Stream::Mixer => 4,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Independent stream for item `index` of a sub-stream (e.g. one scene).
pub fn indexed_stream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which.id() << 32 | (index & 0xFFFF_FFFF));
    rng
}
