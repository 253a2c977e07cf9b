//! Hierarchical, platform-independent random streams.
//!
//! A stream is identified by a 64-bit master seed plus a path of labels
//! (`experiment / seed-index / phase`). The ChaCha key of each stream is a
//! SHA-256 digest of that identity, so deriving a new child never perturbs
//! the draws of an existing one.

use std::fmt;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

#[derive(Clone)]
pub struct RngStream {
    seed: u64,
    path: Vec<String>,
    inner: ChaCha12Rng,
}

impl RngStream {
    /// Root stream for a master seed.
    pub fn new(seed: u64) -> Self {
        Self::at(seed, Vec::new())
    }

    fn at(seed: u64, path: Vec<String>) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"rankope-stream-v1");
        hasher.update(seed.to_le_bytes());
        for label in &path {
            hasher.update((label.len() as u64).to_le_bytes());
            hasher.update(label.as_bytes());
        }
        let mut key = [0u8; 32];
        key.copy_from_slice(&hasher.finalize());
        Self {
            seed,
            path,
            inner: ChaCha12Rng::from_seed(key),
        }
    }

    /// Child stream at `self.path / label`. Independent of how many draws the
    /// parent has already consumed.
    pub fn derive(&self, label: impl fmt::Display) -> Self {
        let mut path = self.path.clone();
        path.push(label.to_string());
        Self::at(self.seed, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[String] {
        &self.path
    }

    /// `seed:a/b/c`, used in run manifests.
    pub fn path_string(&self) -> String {
        format!("{}:{}", self.seed, self.path.join("/"))
    }
}

impl fmt::Debug for RngStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RngStream")
            .field("seed", &self.seed)
            .field("path", &self.path)
            .finish()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic value in `[-1, 1)` keyed by an arbitrary sequence of words.
/// Used for noise that must be a fixed function of `(x, a, k)`.
pub(crate) fn keyed_unit_noise(words: impl IntoIterator<Item = u64>) -> f64 {
    let mut h = 0x51_7cc1_b727_220a_u64;
    for w in words {
        h = mix64(h ^ w);
    }
    let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
    2.0 * unit - 1.0
}
