//! Seeded randomness and the seed-splitting rule.
//!
//! Every stochastic component draws from a ChaCha stream seeded by a stable
//! hash of the base seed and a textual job key, so runs are reproducible and
//! independent jobs get decorrelated streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a base seed and a job key.
///
/// `derive_seed(s, "train/eps=4")` is the documented splitting rule recorded
/// in result metadata: the first 8 bytes (little-endian) of
/// SHA-256(base_seed_le || key).
pub fn derive_seed(base: u64, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_key_sensitive() {
        let a = derive_seed(7, "train/eps=4");
        let b = derive_seed(7, "train/eps=4");
        let c = derive_seed(7, "train/eps=8");
        let d = derive_seed(8, "train/eps=4");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
