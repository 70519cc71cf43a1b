//! Seed derivation and the crate-wide RNG choice.
//!
//! Every random decision in the crate flows from a root seed through
//! splitmix64, so runs are reproducible and independent streams (per sample,
//! per epoch) never collide by accident.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step; the standard finalizer constants.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a stream tag.
pub fn derive_seed(root: u64, tag: u64) -> u64 {
    splitmix64(root ^ splitmix64(tag))
}

/// Deterministic RNG for the given seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
