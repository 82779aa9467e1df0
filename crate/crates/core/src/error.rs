use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("cholesky failed after {attempts} attempts (last jitter {jitter:e}); matrix is not positive definite")]
    NotPositiveDefinite { attempts: usize, jitter: f64 },

    #[error("triangular solve hit a zero diagonal entry at row {0}")]
    SingularTriangular(usize),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("kernel family {0} has no closed-form Fourier-feature inner products")]
    UnsupportedFamily(String),

    #[error("input {value} lies outside the interval [{a}, {b}]")]
    OutsideInterval { value: f64, a: f64, b: f64 },

    #[error("quadrature did not converge (estimated error {0:e})")]
    Quadrature(f64),

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at iteration {iter}: ELBO = {value}")]
    Divergence { iter: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), msg: msg.into() }
    }

    /// Whether the error stems from invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Invalid(_) | Error::Data(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
