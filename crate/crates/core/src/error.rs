use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("family not supported for {0}")]
    UnsupportedFamily(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("mechanism `{got}` cannot be used here (expected {expected})")]
    WrongKind {
        expected: &'static str,
        got: &'static str,
    },

    #[error("entry {index} is {value}, expected -1 or +1")]
    NonBinary { index: usize, value: f64 },

    #[error("penalty multiplier alpha = {0} is below 2")]
    AlphaBelowTwo(f64),

    #[error("{0} is not applicable (NA)")]
    InvalidCombination(String),

    #[error("{0} carries no guarantee (NG)")]
    NoGuarantee(String),

    #[error("infeasible query: {0}")]
    InfeasibleQuery(String),

    #[error("entropy must be positive, got {0}")]
    NonPositiveEntropy(f64),

    #[error("instance too large for exhaustive search: {0}")]
    IntractableInstance(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
