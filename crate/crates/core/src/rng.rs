//! Deterministic RNG substream derivation.
//!
//! Every random decision in the pipeline draws from a stream derived from
//! (seed, purpose, coordinates) rather than from one shared sequential
//! stream. This keeps runs bit-identical regardless of worker count and
//! lets independent features (augmentation, anchor sampling, batching)
//! consume randomness without perturbing each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod purpose {
    pub const INIT: u64 = 0x01;
    pub const BATCH: u64 = 0x02;
    pub const TRIPLET: u64 = 0x03;
    pub const AUGMENT: u64 = 0x04;
    pub const STCS: u64 = 0x05;
    pub const SYNTH: u64 = 0x06;
    pub const SUBSAMPLE: u64 = 0x07;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a seeded generator from a base seed and coordinate tags.
pub fn derive(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0x7473766f735f7631); // "tsvos_v1"
    for &t in tags {
        state = splitmix64(state ^ t.wrapping_mul(0x9e3779b97f4a7c15));
    }
    ChaCha8Rng::seed_from_u64(state)
}
