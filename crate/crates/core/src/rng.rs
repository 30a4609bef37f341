//! Seeded random streams.
//!
//! Every consumer derives its generator from a root seed and a stream name, so
//! adding draws in one subsystem never shifts the sequence seen by another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generator for the named stream of `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut rng = Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Independent sub-generator keyed by an integer (e.g. an image row).
pub fn substream(base_seed: u64, key: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(base_seed);
    rng.set_stream(key);
    rng
}

/// Draws a fresh base seed from `rng`, for fanning out into substreams.
pub fn fork_seed(rng: &mut impl RngCore) -> u64 {
    rng.next_u64()
}
