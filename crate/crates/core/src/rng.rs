//! Keyed random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream identified by
//! `(seed, key)`, so results do not depend on evaluation order and a run can
//! resume from a step count alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent stream for `(seed, key)`.
pub fn stream(seed: u64, key: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// Mixes several integers into one stream key.
pub fn key(parts: &[u64]) -> u64 {
    // splitmix64 chain
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(1, 2).random();
        let b: u64 = stream(1, 2).random();
        let c: u64 = stream(1, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(key(&[1, 2]), key(&[2, 1]));
    }
}
