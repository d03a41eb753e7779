//! Seed derivation for the deterministic pipelines.
//!
//! All randomness flows through `ChaCha8Rng`, whose output stream is fixed by
//! its algorithm and therefore identical across platforms. Child seeds are
//! derived with the SplitMix64 finalizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `hash(seed, i)` used to fan a run seed out to cases, epochs and streams.
pub fn derive_seed(seed: u64, i: u64) -> u64 {
    mix(mix(seed) ^ i.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn derive_seed_str(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in key.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    derive_seed(seed, h)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let seeds: Vec<u64> = (0..100).map(|i| derive_seed(42, i)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), seeds.len());
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
