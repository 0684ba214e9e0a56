//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` whose seed is derived
//! from a master seed plus a small tuple of stream identifiers, so results do
//! not depend on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with a stream identifier into a new, well-mixed seed.
pub fn derive(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Builds the crate's standard RNG from a seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Stream tags, kept distinct so independent draws never share a stream.
pub(crate) const STREAM_SHUFFLE: u64 = 0x5348_5546;
pub(crate) const STREAM_DROPOUT: u64 = 0x4452_4F50;
pub(crate) const STREAM_INIT: u64 = 0x494E_4954;
pub(crate) const STREAM_TRIAL: u64 = 0x5452_4941;
pub(crate) const STREAM_SAMPLE: u64 = 0x5341_4D50;
pub(crate) const STREAM_PROJECTION: u64 = 0x4752_5020;
