//! Named random sub-streams derived from one master seed.
//!
//! Every consumer of randomness (paths, sensor noise, weight init, dropout,
//! dataset split) draws from its own stream, keyed by a name and an index,
//! so adding draws in one place never shifts the numbers seen elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const PATHS: &str = "paths";
pub const NOISE: &str = "noise";
pub const INIT: &str = "init";
pub const DROPOUT: &str = "dropout";
pub const SPLIT: &str = "split";

/// A 64-bit seed for stream `name`, item `index`, under `master`.
pub fn derive(master: u64, name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

pub fn rng(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, name, index))
}
