//! Deterministic sub-seed derivation.
//!
//! A sub-seed is the first eight bytes (little-endian) of
//! `SHA-256(label || ":" || seed as 8 little-endian bytes)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(b":");
    h.update(seed.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// RNG for `(seed, label, index)`, e.g. one stream per partner.
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, label), &index.to_string()))
}
