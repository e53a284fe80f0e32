//! Seeded random streams.
//!
//! Every consumer (parameter init, shuffling, subsetting, ...) draws from its
//! own ChaCha stream derived from the run seed and a stream name, so adding a
//! consumer never shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha20Rng;

pub fn stream(seed: u64, name: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}
