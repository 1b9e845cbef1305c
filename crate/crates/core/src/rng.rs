//! Seeded random streams.
//!
//! Every randomized step draws from a ChaCha stream keyed by
//! `(seed, domain, id)`, so per-scene work is independent of scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream domains. Distinct domains never share a stream for the same id.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Domain {
    Layout = 1,
    Texture = 2,
    Sampling = 3,
    Emission = 4,
    Evaluation = 5,
    Probe = 6,
    Teacher = 7,
}

pub fn stream(seed: u64, domain: Domain, id: u64) -> ChaCha8Rng {
    let key = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(domain as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(id);
    rng
}

/// A child seed, e.g. the emission seed of one epoch.
pub fn derive_seed(seed: u64, domain: Domain, id: u64) -> u64 {
    stream(seed, domain, id).next_u64()
}

/// Two-level id for streams keyed by (epoch, image) or (image, instance).
pub fn pair_id(hi: u64, lo: u64) -> u64 {
    (hi << 32) ^ (lo & 0xFFFF_FFFF)
}
