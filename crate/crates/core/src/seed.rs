//! Deterministic derivation of independent random streams from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Hashes `(run_seed, tag, a, b)` into a 256-bit stream key.
pub fn derive_seed(run_seed: u64, tag: &str, a: u64, b: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"dpsa/seed/v1");
    h.update(run_seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    h.finalize().into()
}

pub fn stream(run_seed: u64, tag: &str, a: u64, b: u64) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_seed(run_seed, tag, a, b))
}
