//! Seed derivation. Every stochastic component takes an explicit seed and
//! derives independent sub-streams from it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::text::fnv1a64;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Child seed for item `index` of the stream named `stream`.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a64(stream.as_bytes())).wrapping_add(index))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(derive_seed(7, "control", 0), derive_seed(7, "treatment", 0));
        assert_ne!(derive_seed(7, "control", 0), derive_seed(7, "control", 1));
        assert_eq!(derive_seed(7, "control", 3), derive_seed(7, "control", 3));
    }
}
