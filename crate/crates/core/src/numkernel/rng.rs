//! Seeded pseudo-random streams.
//!
//! All randomness uses xoshiro256++ (`rand_xoshiro::Xoshiro256PlusPlus`),
//! seeded through SplitMix64 by `seed_from_u64`. Named sub-streams are
//! derived from one base seed as
//!
//! ```text
//! stream_seed = splitmix64(base ^ fnv1a64(label))
//! ```
//!
//! so every consumer (initialization, batching, training, synthesis) gets
//! an independent, reproducible stream from a single `--seed`.

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256PlusPlus as Rng;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One SplitMix64 output step for state `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, label: &str) -> u64 {
    splitmix64(base ^ fnv1a64(label.as_bytes()))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream(base: u64, label: &str) -> Rng {
    seeded(derive_seed(base, label))
}
