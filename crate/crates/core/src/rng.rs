//! Seeded random streams.
//!
//! Every stochastic operation in the crate takes an explicit `&mut Rng`. The
//! generator is ChaCha8, whose output stream is fixed across platforms and
//! releases, so a seed fully determines every draw.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a sub-task (a tile, a class, a repeat)
/// from a base seed. SplitMix64 finalizer over the pair.
pub fn derive(seed: u64, stream: u64) -> Rng {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    Rng::seed_from_u64(z)
}
