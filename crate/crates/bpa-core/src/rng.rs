//! Deterministic randomness plumbing.
//!
//! Every random decision in the pipeline draws from a [`ChaCha8Rng`] whose
//! seed is derived from the run's root seed plus a purpose label, so stages
//! cannot perturb each other's streams and any single stage can be replayed
//! in isolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Derive a child seed from the root seed and a purpose label.
///
/// Labels are free-form but conventionally path-like ("bulk/train",
/// "detector/A/init"). Distinct labels give statistically independent
/// streams.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update([0u8]);
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is at least 8 bytes"))
}

/// A fresh generator for `label` under `root`.
pub fn seeded(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

/// Standard-normal draw (Box-Muller, one value per call).
///
/// Hand-rolled so the byte stream consumed per draw is fixed by this crate,
/// not by a distribution library's internals.
pub fn normal(rng: &mut impl Rng) -> f64 {
    // u1 in (0,1] so the log is finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fill `out` with standard-normal draws.
pub fn fill_normal(rng: &mut impl Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = normal(rng);
    }
}

/// Serializable snapshot of a ChaCha8 generator, stored in checkpoints so
/// training resumes on the exact stream position it stopped at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, lowercase hex.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position split into halves (JSON-safe).
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let raw = hex::decode(&self.seed)
            .map_err(|e| Error::Serde(format!("rng seed is not hex: {e}")))?;
        let seed: [u8; 32] = raw
            .as_slice()
            .try_into()
            .map_err(|_| Error::Serde(format!("rng seed has {} bytes, want 32", raw.len())))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        Ok(rng)
    }
}
