//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum AmcError {
    /// A contract violation: caller handed incompatible shapes to an op.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: String, lhs: String, rhs: String },

    /// A numeric primitive produced NaN/Inf from finite inputs.
    #[error("non-finite output in op {op}")]
    NonFinite { op: String },

    /// A precondition other than a shape conformance failed.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed container file (bad magic, version, truncated header).
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Container parsed but content is inconsistent (missing tensor, bad length).
    #[error("integrity error in {path}: {detail}")]
    Integrity { path: String, detail: String },

    /// Plugin fingerprint does not match the loaded backbone.
    #[error("backbone fingerprint mismatch: plugin expects {expected}, loaded backbone is {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    /// Calibration cannot be fitted (e.g. single-class data).
    #[error("calibration error: {0}")]
    Calibration(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AmcError>;

pub(crate) fn shape_err(op: &str, lhs: &[usize], rhs: &[usize]) -> AmcError {
    AmcError::ShapeMismatch {
        op: op.to_string(),
        lhs: format!("{lhs:?}"),
        rhs: format!("{rhs:?}"),
    }
}
