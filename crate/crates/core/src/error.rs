use thiserror::Error;

/// Errors raised by the numerical pipeline, the oracle and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty matrix")]
    Empty,

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("curvature degenerate: eigenvalue ratio {ratio:e} below floor {floor:e}")]
    Degenerate { ratio: f64, floor: f64 },

    #[error(
        "probability {value} at sample {sample} is on the boundary; \
         curvature paths require 0 < p < 1 for every sample and class"
    )]
    BoundaryProbability { sample: usize, value: f64 },

    #[error("Phi is numerically singular (lambda_min / lambda_max = {ratio:e}); \
             curvature reweighting requires interior probabilities")]
    SingularPhi { ratio: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("zero gradient: no nonzero whitened direction; use a default (zero/random) initialization")]
    ZeroGradient,

    #[error("signals have rank 0 (all-zero block)")]
    RankZero,

    #[error("dense size cap exceeded: {entries} entries > cap {cap}")]
    SizeCap { entries: usize, cap: usize },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
