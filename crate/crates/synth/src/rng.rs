//! Deterministic seed derivation.
//!
//! Every stochastic component draws from a ChaCha generator whose seed is
//! derived from a master seed, a purpose tag, and an index. Derivation is a
//! pure function, so any stage of the pipeline (a training iteration, an
//! epoch shuffle, one phantom subject, one sampled slice) can be reproduced
//! in isolation without replaying upstream RNG state.

use rand_chacha::ChaCha20Rng;
use rand_chacha::rand_core::SeedableRng;

/// splitmix64 finalizer; good avalanche for cheap seed mixing.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(master, tag, index)`.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix(master);
    for &b in tag.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ index)
}

/// Seeded generator for `(master, tag, index)`.
pub fn rng_for(master: u64, tag: &str, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(master, tag, index))
}
