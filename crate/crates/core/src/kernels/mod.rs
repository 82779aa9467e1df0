//! Stationary Matérn kernels on scalar inputs, their additive sum over input
//! dimensions, and a wrapper adding index-coincident noise.

mod tape_ops;

pub use tape_ops::{gram_on_tape, kff_diag_on_tape, AdditiveMaternGram};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaternFamily {
    #[serde(rename = "matern12")]
    Half,
    #[serde(rename = "matern32")]
    ThreeHalf,
    #[serde(rename = "matern52")]
    FiveHalf,
}

impl MaternFamily {
    /// `k / σ²` as a function of the scaled distance `u = r / ℓ`.
    pub fn unit(self, u: f64) -> f64 {
        match self {
            MaternFamily::Half => (-u).exp(),
            MaternFamily::ThreeHalf => (1.0 + SQRT3 * u) * (-SQRT3 * u).exp(),
            MaternFamily::FiveHalf => (1.0 + SQRT5 * u + 5.0 / 3.0 * u * u) * (-SQRT5 * u).exp(),
        }
    }

    /// `d(k / σ²) / du` for `u ≥ 0`.
    pub fn unit_derivative(self, u: f64) -> f64 {
        match self {
            MaternFamily::Half => -(-u).exp(),
            MaternFamily::ThreeHalf => -3.0 * u * (-SQRT3 * u).exp(),
            MaternFamily::FiveHalf => -5.0 / 3.0 * u * (1.0 + SQRT5 * u) * (-SQRT5 * u).exp(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaternFamily::Half => "matern12",
            MaternFamily::ThreeHalf => "matern32",
            MaternFamily::FiveHalf => "matern52",
        }
    }
}

impl fmt::Display for MaternFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaternFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "matern12" | "half" | "1/2" => Ok(MaternFamily::Half),
            "matern32" | "three-half" | "3/2" => Ok(MaternFamily::ThreeHalf),
            "matern52" | "five-half" | "5/2" => Ok(MaternFamily::FiveHalf),
            other => Err(Error::config("kernel", format!("unknown Matérn family `{other}`"))),
        }
    }
}

/// Evaluates a covariance between two points.
pub trait Kernel {
    fn input_dim(&self) -> usize;

    /// Covariance of `x` and `y`, without any index-coincidence noise.
    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64>;

    /// Noise added on the Gram diagonal when both sides are the same collection.
    fn delta_variance(&self) -> f64 {
        0.0
    }
}

/// One-dimensional Matérn kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaternKernel {
    pub family: MaternFamily,
    pub variance: f64,
    pub lengthscale: f64,
}

impl MaternKernel {
    pub fn new(family: MaternFamily, variance: f64, lengthscale: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) || !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::Invalid(format!(
                "kernel hyperparameters must be positive, got variance {variance} and lengthscale {lengthscale}"
            )));
        }
        Ok(MaternKernel { family, variance, lengthscale })
    }

    /// Covariance at distance `r = |x − x′|`.
    pub fn at_distance(&self, r: f64) -> f64 {
        self.variance * self.family.unit(r.abs() / self.lengthscale)
    }
}

impl Kernel for MaternKernel {
    fn input_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(1, x, y)?;
        Ok(self.at_distance(x[0] - y[0]))
    }
}

/// Sum of one Matérn kernel per input dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveKernel {
    pub components: Vec<MaternKernel>,
}

impl AdditiveKernel {
    pub fn new(components: Vec<MaternKernel>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Empty("additive kernel components"));
        }
        Ok(AdditiveKernel { components })
    }

    /// Builds from log-variance and log-lengthscale columns (`D x 1` each).
    pub fn from_log_params(family: MaternFamily, log_variance: &Matrix, log_lengthscale: &Matrix) -> Result<Self> {
        if log_variance.len() != log_lengthscale.len() {
            return Err(Error::shape(
                "additive kernel",
                format!("{} variances vs {} lengthscales", log_variance.len(), log_lengthscale.len()),
            ));
        }
        let components = log_variance
            .data()
            .iter()
            .zip(log_lengthscale.data())
            .map(|(lv, ll)| MaternKernel::new(family, lv.exp(), ll.exp()))
            .collect::<Result<Vec<_>>>()?;
        AdditiveKernel::new(components)
    }

    /// `k(x, x)`, the same for every point.
    pub fn diagonal_value(&self) -> f64 {
        self.components.iter().map(|c| c.variance).sum()
    }
}

impl Kernel for AdditiveKernel {
    fn input_dim(&self) -> usize {
        self.components.len()
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(self.components.len(), x, y)?;
        Ok(self.components.iter().zip(x.iter().zip(y)).map(|(c, (a, b))| c.at_distance(a - b)).sum())
    }
}

/// A base kernel plus noise on exact index coincidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyKernel<K> {
    pub base: K,
    pub noise: f64,
}

impl<K: Kernel> Kernel for NoisyKernel<K> {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.base.eval(x, y)
    }

    fn delta_variance(&self) -> f64 {
        self.noise
    }
}

fn check_dims(expected: usize, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != expected || y.len() != expected {
        return Err(Error::shape("kernel", format!("expected {expected} dims, got {} and {}", x.len(), y.len())));
    }
    Ok(())
}

/// Pointwise covariance; index-coincidence noise never applies here.
pub fn kern_eval(k: &dyn Kernel, x: &[f64], y: &[f64]) -> Result<f64> {
    k.eval(x, y)
}

/// Gram matrix between the rows of `xs` and of `ys`.
///
/// `ys = None` means the same collection as `xs`; only then does
/// `include_delta` add the kernel's noise on the diagonal.
pub fn gram(k: &dyn Kernel, xs: &Matrix, ys: Option<&Matrix>, include_delta: bool) -> Result<Matrix> {
    let same = ys.is_none();
    let ys = ys.unwrap_or(xs);
    if xs.cols() != k.input_dim() || ys.cols() != k.input_dim() {
        return Err(Error::shape(
            "gram",
            format!("kernel takes {} dims, inputs have {} and {}", k.input_dim(), xs.cols(), ys.cols()),
        ));
    }
    let mut out = Matrix::zeros(xs.rows(), ys.rows());
    for i in 0..xs.rows() {
        for j in 0..ys.rows() {
            out[(i, j)] = k.eval(xs.row(i), ys.row(j))?;
        }
    }
    if same && include_delta {
        out.add_diagonal(k.delta_variance());
    }
    Ok(out)
}
