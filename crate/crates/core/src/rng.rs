//! Deterministic seeding helpers.
//!
//! Every randomized routine in this crate takes an explicit `u64` seed and
//! draws from a ChaCha8 stream, so identical inputs always reproduce
//! identical outputs. `mix` derives independent stream seeds from a base
//! seed plus context words (dimension, cell coordinates, repeat index, a
//! purpose salt), which keeps parallel sweep cells decorrelated without any
//! shared mutable state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream seed from a base seed and context words.
pub fn mix(base: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ 0xD6E8_FEB8_6659_FD93);
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn chacha_streams_are_reproducible() {
        let a: Vec<u64> = chacha(7).random_iter().take(8).collect();
        let b: Vec<u64> = chacha(7).random_iter().take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn mix_separates_contexts() {
        let s1 = mix(42, &[3, 0]);
        let s2 = mix(42, &[3, 1]);
        let s3 = mix(42, &[4, 0]);
        assert_ne!(s1, s2);
        assert_ne!(s1, s3);
        assert_ne!(s2, s3);
        assert_eq!(s1, mix(42, &[3, 0]));
    }

    #[test]
    fn mix_depends_on_base() {
        assert_ne!(mix(1, &[5]), mix(2, &[5]));
        let mut rng = chacha(mix(1, &[5]));
        let _: f64 = rng.random();
    }
}
