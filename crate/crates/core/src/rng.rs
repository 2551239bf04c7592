//! Seed plumbing. Every random draw in a run descends from one root seed
//! through a named substream, so individual stages can be pinned in tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Well-known substream names.
pub mod streams {
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
    pub const PERTURBATION: &str = "perturbation";
    pub const SAMPLER: &str = "sampler";
    pub const TRAIN: &str = "train";
    pub const METRICS: &str = "metrics";
}

/// Derives a child seed from `(root, name)`.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn substream(root: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(substream_seed(root, name))
}

pub fn seeded(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}
