//! Seeded random streams.
//!
//! Every stochastic choice in the crate draws from a ChaCha8 generator keyed by
//! a 64-bit seed and a stream index. Distinct purposes use distinct stream
//! indices so that, for example, the CT and PET mask draws for one crop never
//! share a keystream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as Rng;

/// Stream offsets for the independent purposes a single seed feeds.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const HEAD_INIT: u64 = 2;
    pub const EPOCH_ORDER: u64 = 3;
    pub const CROP: u64 = 4;
    pub const MASK_CT: u64 = 5;
    pub const MASK_PET: u64 = 6;
    pub const CORPUS_ORDER: u64 = 7;
    pub const PHANTOM: u64 = 8;
    pub const NOISE: u64 = 9;
}

/// Generator for `(seed, stream)`.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a base seed with an index (SplitMix64 finalizer) so that nearby
/// indices produce unrelated child seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
