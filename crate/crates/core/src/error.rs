use thiserror::Error;

/// Errors produced by the tensor voting library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TvError {
    /// Malformed input: non-finite coordinates, bad parameters, wrong shapes.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two points of different dimension were combined.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Geometry for which a quantity is undefined, e.g. a vote between coincident points.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// The proximity weight is too small to invert.
    #[error("proximity weight {0:e} underflows; prune distant neighbors first")]
    Underflow(f64),

    /// Fewer samples than the model needs.
    #[error("underdetermined: need at least {needed} samples, got {got}")]
    Underdetermined { needed: usize, got: usize },

    /// EM inlier support collapsed below what the model needs.
    #[error("degenerate support: total inlier weight {weight:.3e} is below {needed}")]
    DegenerateSupport { weight: f64, needed: usize },

    /// A numerical routine failed to produce a usable result.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, TvError>;
