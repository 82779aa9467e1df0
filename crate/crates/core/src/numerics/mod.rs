//! Dense matrices, factorizations and random streams.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{
    cholesky, cholesky_solve, inverse, logdet_from_cholesky, logsumexp, min_eigenvalue, symmetric_eigen,
    tri_solve, CholeskyFactor, JitterPolicy, TriSide,
};
pub use matrix::Matrix;
pub use rng::Rng;

/// `log N(y | mean, var)`.
#[inline]
pub fn log_normal_pdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + var.ln() + (y - mean) * (y - mean) / var)
}
