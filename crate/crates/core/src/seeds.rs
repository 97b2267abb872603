//! Seed handling.
//!
//! A run has one top-level seed. Named sub-seeds (`split`, `init`, `shuffle`,
//! `tsne`, ...) are derived as the first eight bytes (little endian) of
//! `SHA-256(seed_le_bytes || name)`. All generators are ChaCha20 seeded through
//! `SeedableRng::seed_from_u64`, which is portable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha20Rng;

pub fn derive(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn named_rng(seed: u64, name: &str) -> Rng {
    rng(derive(seed, name))
}
