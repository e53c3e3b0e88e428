//! Seed derivation. Every random stream is a ChaCha8 generator keyed by a 64-bit seed
//! obtained by mixing a base seed with stream labels, so any episode can be replayed
//! (or resumed) without carrying generator state around.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a base seed with an ordered list of labels.
pub fn derive(base: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix(base), |acc, &l| mix(acc ^ mix(l)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(base: u64, labels: &[u64]) -> Rng {
    rng(derive(base, labels))
}

// Stream labels.
pub const STREAM_INIT: u64 = 0x1;
pub const STREAM_EPISODE: u64 = 0x2;
pub const STREAM_TASKS: u64 = 0x3;
pub const STREAM_WORLD: u64 = 0x4;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
        assert_ne!(derive(7, &[1, 2]), derive(7, &[2, 1]));
        assert_ne!(derive(7, &[1]), derive(8, &[1]));
        let a: u64 = rng_for(3, &[STREAM_EPISODE, 10]).gen();
        let b: u64 = rng_for(3, &[STREAM_EPISODE, 10]).gen();
        assert_eq!(a, b);
    }
}
