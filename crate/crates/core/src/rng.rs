//! Named, reproducible random streams.
//!
//! Every stage draws from its own stream, keyed by (master seed, stage
//! name) through SHA-256. Adding a new stage therefore never perturbs
//! the draws of existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Stream for one named stage of a run.
pub fn stage_rng(master_seed: u64, stage: &str) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(stage_seed(master_seed, stage))
}

/// The 32-byte seed backing [`stage_rng`], exposed so manifests can
/// record a short form of it.
pub fn stage_seed(master_seed: u64, stage: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(stage.as_bytes());
    hasher.finalize().into()
}

/// First 8 bytes of the stage seed as a u64, for human-readable logs.
pub fn stage_seed_u64(master_seed: u64, stage: &str) -> u64 {
    let s = stage_seed(master_seed, stage);
    u64::from_le_bytes(s[..8].try_into().unwrap())
}
