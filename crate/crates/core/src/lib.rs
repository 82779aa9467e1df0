//! Inter-domain deep Gaussian processes.
//!
//! Deep GPs whose inducing variables are RKHS Fourier-feature projections,
//! trained with doubly stochastic variational inference, alongside local
//! inducing-point baselines and an experiment harness.

pub mod autodiff;
pub mod dgp;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod numerics;
pub mod sparse_gp;
pub mod training;
pub mod vff;

pub use error::{Error, Result};
