//! Seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a child seed from a global seed and any number of tags.
///
/// Used for the per-sample augmentation contract
/// `seed = hash(global_seed, epoch, sample_id)`.
pub fn derive_seed(global: u64, tags: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    for tag in tags {
        hasher.update((tag.len() as u64).to_le_bytes());
        hasher.update(tag);
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

pub fn sample_seed(global: u64, epoch: usize, sample_id: &str) -> u64 {
    derive_seed(global, &[&(epoch as u64).to_le_bytes(), sample_id.as_bytes()])
}
