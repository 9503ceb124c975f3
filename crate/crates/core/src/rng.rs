//! Seeded SplitMix64 streams. Every random choice in the crate draws from
//! one of these so runs are bit-reproducible.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64 as Rng;

use crate::embed::fnv1a64;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for `label` under a base seed.
pub fn stream(seed: u64, label: &str) -> Rng {
    seeded(mix(seed ^ fnv1a64(label.as_bytes())))
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
