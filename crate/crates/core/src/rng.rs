//! Deterministic randomness.
//!
//! A single root seed fans out to named sub-streams. Each stream key is a hash
//! of (root seed, consumer name, counter), so introducing a new consumer never
//! shifts the draws seen by existing ones, and any thread count observes the
//! same sequences.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream names used across the pipeline. Kept in one place so collisions are
/// visible at a glance.
pub mod stream {
    pub const DATA: &str = "data";
    pub const POOL: &str = "pool";
    pub const INIT: &str = "init";
    pub const SHUFFLE: &str = "shuffle";
    pub const GMM: &str = "gmm";
    pub const KMEANS: &str = "kmeans";
    pub const PRUNE: &str = "prune";
    pub const SPLIT: &str = "split";
    pub const LOCAL_VAL: &str = "local-val";
}

/// Fans a root seed out into independent named RNG streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSplitter {
    root: u64,
}

impl SeedSplitter {
    pub fn new(root: u64) -> Self {
        SeedSplitter { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// RNG for a named consumer.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        self.substream(name, 0)
    }

    /// RNG for a named consumer at a counter (client id, round, restart, ...).
    pub fn substream(&self, name: &str, counter: u64) -> ChaCha8Rng {
        self.derive(name, &[counter])
    }

    /// Two-level counter, e.g. (client, round).
    pub fn substream2(&self, name: &str, a: u64, b: u64) -> ChaCha8Rng {
        self.derive(name, &[a, b])
    }

    /// Three-level counter, e.g. (client, round, epoch).
    pub fn substream3(&self, name: &str, a: u64, b: u64, c: u64) -> ChaCha8Rng {
        self.derive(name, &[a, b, c])
    }

    fn derive(&self, name: &str, counters: &[u64]) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.root.to_le_bytes());
        hasher.update([0u8]);
        hasher.update(name.as_bytes());
        for c in counters {
            hasher.update([0u8]);
            hasher.update(c.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }
}
