//! Ergodic diagnostics for SGD and ghost-category classifier heads.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small tape-based reverse-mode engine over [`Tensor`]s.
//! - [`ghost`]: ghost-extended softmax cross-entropy and its decomposition.
//! - [`models`]: an MLP and the two-block CNN, both ending in a ghost head.
//! - [`optim`]: the SGD map run as a Markov chain with read-only observers.
//! - [`diagnostics`]: ergodic averages, the running Lyapunov estimate,
//!   empirical-measure sketches and first-peak detection.
//! - [`data`]: IDX parsing, RMNIST subsampling and synthetic landscapes.
//! - [`harness`]: configs, the paired baseline/ghost study, path
//!   certificates, CSV/JSON persistence and SVG plots.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod ghost;
pub mod harness;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

use sha2::{Digest, Sha256};

/// Stable 64-bit fingerprint of a float slice (SHA-256 over the
/// little-endian bit patterns, truncated).
pub fn fingerprint_f64(values: &[f64]) -> u64 {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_bits().to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// Hex SHA-256 of a byte buffer.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
