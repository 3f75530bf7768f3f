//! Seed fan-out. A master seed is expanded into independent streams for
//! corruption, initialization, adaptation and splitting via a keyed hash.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a sub-seed from `master` and a textual key.
pub fn sub_seed(master: u64, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn keyed_rng(master: u64, key: &str) -> Rng {
    rng_from_seed(sub_seed(master, key))
}

/// Hex digest of arbitrary bytes, used for config hashes.
pub fn hash_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}
