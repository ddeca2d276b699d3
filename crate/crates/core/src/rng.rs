//! Seed derivation. Every random stream in a run is a ChaCha8 generator whose
//! seed is derived from the run seed and a stream tag, so streams never alias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Named random streams used by a single run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Partition,
    Split,
    MiniBatch,
    Resources,
    Init,
    Async,
    PseudoLabels,
    Repeat,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` for the given stream and index.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let tag = stream as u64 + 1;
    splitmix64(splitmix64(seed ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index)
}

pub fn rng_for(seed: u64, stream: Stream, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, stream, index))
}
