//! Seed derivation.
//!
//! A master seed fans out to independent sub-seeds with a splitmix64
//! finalizer: `derive(master, tag) = mix(master ^ mix(fnv1a(tag)))`. Every
//! stochastic component takes its own sub-seed, so changing one stage never
//! shifts the random stream of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Sub-seed for the stage or component named `tag`.
pub fn derive(master: u64, tag: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(tag.as_bytes())))
}

/// Sub-seed for the `i`-th item of a stream (per-example generation, per-epoch shuffles).
pub fn derive_index(seed: u64, i: u64) -> u64 {
    splitmix64(seed ^ splitmix64(i.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Hash of the exact bit patterns of `xs`, mixed with `salt`.
pub fn hash_f64s(xs: &[f64], salt: u64) -> u64 {
    xs.iter()
        .fold(splitmix64(salt), |h, v| splitmix64(h ^ v.to_bits()))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
