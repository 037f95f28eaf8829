//! Seeded generators. Every random decision in the crate draws from a ChaCha8 stream
//! derived from `(seed, purpose, index)`, so results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes that get disjoint generator streams.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    PatientOrder = 1,
    Carryover = 2,
    EpochShuffle = 3,
    Fold = 4,
    Init = 5,
    Phantom = 6,
    Batch = 7,
}

pub fn derived_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}
