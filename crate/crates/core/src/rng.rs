//! The artifact-wide random number generator.
//!
//! Every random draw goes through ChaCha8 seeded from a `u64`. Independent
//! consumers (dropout masks, augmentation, shuffling, weight init) derive their
//! own generator from `(seed, stream)` so runs replay exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for the given seed on stream 0.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for the given seed on an independent ChaCha stream.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes several integers into one seed (SplitMix64 finaliser).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream identifiers, one per kind of consumer.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const SPLIT: u64 = 5;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_distinct_and_replayable() {
        let a: [u64; 4] = core::array::from_fn(|_| 0);
        let mut r1 = stream(7, 1);
        let mut r2 = stream(7, 2);
        let mut r3 = stream(7, 1);
        let x1: [u64; 4] = a.map(|_| r1.next_u64());
        let x2: [u64; 4] = a.map(|_| r2.next_u64());
        let x3: [u64; 4] = a.map(|_| r3.next_u64());
        assert_ne!(x1, x2);
        assert_eq!(x1, x3);
    }

    #[test]
    fn derive_seed_depends_on_order() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[5, 9, 3]), derive_seed(&[5, 9, 3]));
    }
}
