//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by distribution evaluation, fitting, selection, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch between arguments.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A matrix that must be symmetric positive definite failed to factorize.
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// A scalar parameter is outside its domain.
    #[error("parameter out of domain: {0}")]
    Domain(String),

    /// A requested moment does not exist for the given degrees of freedom.
    #[error("moment does not exist: requires nu > {required}, got nu = {nu}")]
    MomentUndefined { required: f64, nu: f64 },

    /// A normalizing probability underflowed below the representable range.
    #[error("normalizing probability underflow in {0}")]
    Underflow(String),

    /// A mixture component collapsed during fitting.
    #[error("component {component} degenerated at iteration {iteration}: mixing proportion {pi:.3e} fell below {floor:.3e}")]
    DegenerateComponent {
        component: usize,
        iteration: usize,
        pi: f64,
        floor: f64,
    },

    /// Could not build a valid initial partition.
    #[error("initialization failed for g = {g}, n = {n}: {reason}")]
    Initialization { g: usize, n: usize, reason: String },

    /// Every restart of a multi-start fit failed.
    #[error("all {count} restarts failed:\n{}", causes.join("\n"))]
    AllRestartsFailed { count: usize, causes: Vec<String> },

    /// The selection grid admits no candidate model.
    #[error("selection grid is empty: {0}")]
    EmptyGrid(String),

    /// Two label vectors have different lengths.
    #[error("label length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    /// Malformed CSV input, with 1-based coordinates.
    #[error("CSV error at row {row}, column {col}: {reason}")]
    Csv { row: usize, col: usize, reason: String },

    /// Unsupported model file version tag.
    #[error("unknown model file version {found:?}, expected {expected:?}")]
    UnknownVersion { found: String, expected: String },

    /// Invalid configuration or flag combination.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv {
            row: 0,
            col: 0,
            reason: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
