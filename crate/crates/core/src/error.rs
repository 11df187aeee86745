use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive definite after jitter escalation")]
    NotPositiveDefinite,
    #[error("{op} did not converge after {iterations} iterations")]
    NoConvergence { op: &'static str, iterations: usize },
    #[error("matrix is numerically rank deficient (column {column})")]
    RankDeficient { column: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("replication counts sum to {got}, expected {expected}")]
    CountMismatch { expected: usize, got: usize },
    #[error("per-basis attention would need {needed} entries, cap is {cap}")]
    ResourceCap { needed: usize, cap: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("variable {0} does not belong to this tape")]
    ForeignVariable(usize),
    #[error("gradient root must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("too many classes for a label map: {0} (max 255)")]
    TooManyClasses(usize),
    #[error("{path}: bad magic")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported format version {found}")]
    VersionMismatch { path: PathBuf, found: u32 },
    #[error("{path}: corrupt or truncated payload ({detail})")]
    ShapeCorrupt { path: PathBuf, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.into(),
        got: got.into(),
    }
}
