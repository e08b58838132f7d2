//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// Variants map one-to-one onto the failure classes surfaced by the CLI
/// (each class gets its own process exit code there).
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension disagreement.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Index (token id, class target, span position) out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Invalid configuration value or unknown configuration key.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a documented contract (bad span, empty class, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed JSON or text input.
    #[error("parse error: {0}")]
    Parse(String),

    /// Malformed binary container (bad magic, truncation, size mismatch).
    #[error("format error: {0}")]
    Format(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A forward operation produced NaN or Inf.
    #[error("non-finite value in op `{op}`")]
    NonFinite { op: &'static str },

    /// Training aborted on a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// Trace/example misalignment in analysis inputs.
    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Internal invariant violation (a bug, not a user error).
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;
