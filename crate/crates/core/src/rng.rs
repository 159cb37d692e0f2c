//! Seeded random streams. Every stochastic component draws from its own
//! ChaCha stream so results are a pure function of the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers; distinct purposes never share a stream.
pub(crate) mod streams {
    pub const SYNTHETIC: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const SUBSAMPLE: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const ALGORITHM: u64 = 6;
    pub const TEXTURE_POOL: u64 = 7;
    /// Transform `k` of a set uses `TRANSFORM_BASE + k`.
    pub const TRANSFORM_BASE: u64 = 1 << 32;
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes additional words into a seed (SplitMix64 finalizer).
pub fn mix_seed(seed: u64, words: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &w in words {
        h = h.wrapping_add(w).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}
