//! Seed derivation. Every random draw in a run flows from one explicit seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive a child seed from a parent seed and a list of labels.
///
/// Uses a cryptographic hash so that adding labels to one path never
/// perturbs the seeds of another.
pub fn derive_seed(parent: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(parent: u64, labels: &[&str]) -> Rng {
    rng_from(derive_seed(parent, labels))
}
