//! Named random sub-streams derived from one root seed.
//!
//! Every consumer of randomness ("t_sample", "positions", "datagen", ...) gets
//! its own ChaCha stream keyed by `sha256(root_seed || name)`, so adding draws
//! in one component never shifts the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn substream(root_seed: u64, name: &str) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

/// Sub-stream for item `index` of a named family, e.g. one stream per document.
pub fn indexed_substream(root_seed: u64, name: &str, index: u64) -> Rng {
    substream(root_seed, &format!("{name}/{index}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_independent() {
        let mut r = substream(7, "a");
        let a: Vec<u64> = (0..4).map(|_| r.random()).collect();
        let mut r = substream(7, "a");
        let b: Vec<u64> = (0..4).map(|_| r.random()).collect();
        let mut r = substream(7, "b");
        let c: Vec<u64> = (0..4).map(|_| r.random()).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
