use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("sample kind mismatch: {0}")]
    KindMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotSpd { min_eigenvalue: f64 },

    #[error("degenerate Gram matrix: no eigenvalue above the truncation threshold")]
    DegenerateGram,

    #[error("negative curvature on coordinate {coordinate} (diagonal {diagonal:e})")]
    NonConvex { coordinate: usize, diagonal: f64 },

    #[error("singular linear system (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("degenerate code normalization: coefficient sum {sum:e}")]
    DegenerateNormalization { sum: f64 },

    #[error("collapsed dictionary: atom discrepancy {discrepancy:e} is too small")]
    CollapsedDictionary { discrepancy: f64 },

    #[error(
        "objective increased at iteration {iteration}: {previous:e} -> {current:e}"
    )]
    MonotonicityViolation {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("problem too large for the dense solver: {size} unknowns exceed the cap of {cap}; reduce the dictionary or training size")]
    TooLarge { size: usize, cap: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("kernel parameter is not learnable for {0}")]
    NotLearnable(String),
}
