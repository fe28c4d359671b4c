//! Deterministic keyed random streams.
//!
//! Every stochastic quantity in the library is drawn from a ChaCha stream
//! whose seed is a hash of (user seed, domain tag, counters). Reruns with
//! the same key reproduce the same draws bit-for-bit, without storing noise.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for seed derivation.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed, a domain tag and counters.
pub fn derive_seed(seed: u64, tag: &str, counters: &[u64]) -> u64 {
    let mut h = mix(seed ^ 0x5851_f42d_4c95_7f2d);
    for b in tag.as_bytes() {
        h = mix(h ^ u64::from(*b));
    }
    for c in counters {
        h = mix(h ^ *c);
    }
    h
}

/// A ChaCha stream keyed by (seed, tag, counters).
pub fn keyed_rng(seed: u64, tag: &str, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, counters))
}
