//! Seeded random streams.
//!
//! All randomness in the crate flows from a single root seed. Independent
//! subsystems (weight init, epoch shuffling, data generation, selection)
//! draw from named substreams so that changing how one subsystem consumes
//! randomness does not perturb the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic FNV-1a hash of the stream name, mixed into the seed.
fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG for the substream `name` of `root_seed`.
pub fn substream(root_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(root_seed ^ hash_name(name))
}

/// Substream further indexed by a counter (epoch, iteration, sample id).
pub fn substream_indexed(root_seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mixed = root_seed ^ hash_name(name) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mixed)
}
