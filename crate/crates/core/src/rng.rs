//! Named random sub-streams derived from one master seed.
//!
//! Each stream is a ChaCha8 generator seeded with the master seed and
//! switched to a fixed stream id, so variants that share a seed draw
//! identical data, betas and crops regardless of what else they consume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Data,
    Beta,
    Crop,
    Batch,
    Night,
    Scenes,
    Translate,
    AdaptBatch,
    DecoderBatch,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Data => 2,
            Stream::Beta => 3,
            Stream::Crop => 4,
            Stream::Batch => 5,
            Stream::Night => 6,
            Stream::Scenes => 7,
            Stream::Translate => 8,
            Stream::AdaptBatch => 9,
            Stream::DecoderBatch => 10,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Generator for item `index` of a numbered family (one scene per index).
pub fn indexed(seed: u64, which: Stream, family: u64, index: u64) -> Rng {
    let mix = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(family.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    rng.set_stream(which.id());
    rng
}
