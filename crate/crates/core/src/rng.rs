//! Named random streams derived from one master seed.
//!
//! Every consumer of randomness (split construction, batch order,
//! augmentation, feature augmentation, parameter init) owns its own stream so
//! that adding draws in one place never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream_seed(master: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, name: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, name))
}

pub mod names {
    pub const SPLIT: &str = "data.split";
    pub const LABELED_ORDER: &str = "data.labeled";
    pub const UNLABELED_ORDER: &str = "data.unlabeled";
    pub const AUGMENT: &str = "augment";
    pub const FEATURE_AUG: &str = "fa";
    pub const INIT_ENCODER: &str = "init.encoder";
    pub const INIT_CLASSIFIER: &str = "init.classifier";
    pub const INIT_PROJECTOR: &str = "init.projector";
}
