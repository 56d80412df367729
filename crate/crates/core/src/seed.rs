//! Seed derivation helpers. Every random stream in the crate is derived from
//! an explicit user seed through these functions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream))
}

/// Content hash of a coordinate list, used to key purifier randomness to the
/// cloud being purified.
pub(crate) fn hash_coords(coords: &[f64]) -> u64 {
    coords
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |h, c| mix(h, c.to_bits()))
}
