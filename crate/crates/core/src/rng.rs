//! Seeding helpers. All randomness in the crate flows from ChaCha8 streams
//! keyed by values derived here, so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of two counters.
pub fn hash2(a: u64, b: u64) -> u64 {
    mix64(mix64(a) ^ b.rotate_left(32))
}

/// Generator for the `(a, b)` cell of a counter-keyed family under `seed`.
pub fn keyed(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ hash2(a, b))
}

/// Independent sub-seed for a named purpose.
pub fn derive(seed: u64, purpose: u64) -> u64 {
    mix64(seed ^ mix64(purpose))
}
