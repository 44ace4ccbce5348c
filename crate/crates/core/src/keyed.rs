//! Deterministic pseudorandom streams keyed by `(seed, domain, key)`.
//!
//! Every random decision that must be reproducible per patient (split points,
//! negative subsampling, synthetic generation) draws from its own stream so
//! that adding or removing one patient never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn keyed_rng(seed: u64, domain: &str, key: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(key.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Hex-encoded SHA-256 of the given parts, separated by NUL bytes.
pub fn content_hash(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0u8]);
        }
        hasher.update(part.as_bytes());
    }
    hex::encode(hasher.finalize())
}
