//! Counter-mode randomness: every draw is keyed by the identity of what is
//! being drawn, never by call order, so results do not depend on thread
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A generator seeded from `parts` joined with a separator.
pub fn keyed_rng(parts: &[&str]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

/// A 64-bit seed derived from `parts`, for seeding nested components.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn keyed_streams_are_stable_and_distinct() {
        let a: u64 = keyed_rng(&["1", "m", "t", "0"]).random();
        let b: u64 = keyed_rng(&["1", "m", "t", "0"]).random();
        let c: u64 = keyed_rng(&["1", "m", "t", "1"]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // separator prevents ambiguous concatenation
        assert_ne!(derive_seed(&["ab", "c"]), derive_seed(&["a", "bc"]));
    }
}
