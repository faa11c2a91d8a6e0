//! Seeded random sources and seed derivation.
//!
//! Every stochastic component takes an explicit [`Rng`]. Child seeds are derived by
//! hashing the parent seed together with a list of labels, so a run's stream never
//! depends on the order in which sibling runs were scheduled.

use rand::SeedableRng;
use sha2::{Digest, Sha256};

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn derive_seed(parent: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}

pub fn derive_rng(parent: u64, labels: &[&str]) -> Rng {
    rng_from_seed(derive_seed(parent, labels))
}
