use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank {rank} exceeds the maximum {max} for this shape")]
    RankTooLarge { rank: usize, max: usize },

    #[error("bad tensor file magic")]
    BadMagic,

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("matrix is not skew-symmetric (max asymmetry {0:e})")]
    NotSkew(f64),

    #[error("matrix is not orthogonal (||Q^T Q - I|| = {0:e})")]
    NotOrthogonal(f64),

    #[error("I + Q is numerically singular (eigenvalue at -1)")]
    MinusOneEigenvalue,

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("{value} is not divisible by {divisor}")]
    NotDivisible { value: usize, divisor: usize },

    #[error("no feasible shape: {0}")]
    NoFeasibleShape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
