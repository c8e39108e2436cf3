//! Seed derivation and content fingerprinting.
//!
//! Every source of randomness in the crate is a ChaCha stream derived from
//! one master seed plus a purpose label, so independent subsystems never
//! share or perturb each other's streams and whole runs replay bit-exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG for one purpose, independent of all other purposes.
pub fn derive_rng(master_seed: u64, purpose: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Incremental fingerprint over heterogeneous content (names, shapes, data).
pub struct Fingerprint {
    hasher: Sha256,
}

impl Fingerprint {
    pub fn new() -> Self {
        Self {
            hasher: Sha256::new(),
        }
    }

    pub fn push_bytes(&mut self, bytes: &[u8]) {
        self.hasher.update(bytes);
    }

    pub fn push_str(&mut self, s: &str) {
        self.hasher.update(s.as_bytes());
        self.hasher.update([0u8]);
    }

    pub fn push_usizes(&mut self, values: &[usize]) {
        for v in values {
            self.hasher.update((*v as u64).to_le_bytes());
        }
    }

    pub fn push_f64s(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.hasher.update(v.to_le_bytes());
        }
    }

    pub fn push_f32s(&mut self, values: impl IntoIterator<Item = f32>) {
        for v in values {
            self.hasher.update(v.to_le_bytes());
        }
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

impl Default for Fingerprint {
    fn default() -> Self {
        Self::new()
    }
}
