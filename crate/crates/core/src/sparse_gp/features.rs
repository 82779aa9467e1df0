use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{gram_on_tape, MaternFamily};
use crate::numerics::Matrix;
use crate::vff::{vff_kuf_on_tape, vff_kuu_on_tape, Interval};

/// Tape handles of an additive Matérn kernel's log-hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct KernelVars {
    pub family: MaternFamily,
    pub log_variance: Var,
    pub log_lengthscale: Var,
}

/// Supplies the inducing covariance `Kuu` and the cross-covariance `Kuf`
/// (`M′ x N`) for one layer.
pub trait InducingFeature: Send + Sync {
    fn kind(&self) -> &'static str;

    /// `M′` for a layer with `input_dim` inputs.
    fn num_inducing(&self, input_dim: usize) -> usize;

    /// Whether the feature needs trainable inducing inputs.
    fn has_inducing_inputs(&self) -> bool {
        false
    }

    fn kuu(&self, tape: &mut Tape, kernel: &KernelVars, inducing_inputs: Option<Var>) -> Result<Var>;

    fn kuf(&self, tape: &mut Tape, kernel: &KernelVars, inducing_inputs: Option<Var>, h: Var) -> Result<Var>;
}

/// Inducing variables as function values at pseudo-inputs `Z` (`M x D`).
#[derive(Clone, Debug, PartialEq)]
pub struct LocalPoints {
    pub count: usize,
    /// Fixed diagonal added to `Kuu`.
    pub jitter: f64,
}

impl LocalPoints {
    pub const DEFAULT_JITTER: f64 = 1e-6;

    pub fn new(count: usize) -> Self {
        LocalPoints { count, jitter: Self::DEFAULT_JITTER }
    }
}

fn require_inputs(z: Option<Var>) -> Result<Var> {
    z.ok_or_else(|| Error::Invalid("local inducing points need inducing inputs".into()))
}

impl InducingFeature for LocalPoints {
    fn kind(&self) -> &'static str {
        "local-points"
    }

    fn num_inducing(&self, _input_dim: usize) -> usize {
        self.count
    }

    fn has_inducing_inputs(&self) -> bool {
        true
    }

    fn kuu(&self, tape: &mut Tape, kernel: &KernelVars, inducing_inputs: Option<Var>) -> Result<Var> {
        let z = require_inputs(inducing_inputs)?;
        let k = gram_on_tape(tape, kernel.family, z, z, kernel.log_variance, kernel.log_lengthscale)?;
        if self.jitter == 0.0 {
            return Ok(k);
        }
        let m = tape.value(z).rows();
        let j = tape.constant(Matrix::identity(m).scale(self.jitter));
        tape.add(k, j)
    }

    fn kuf(&self, tape: &mut Tape, kernel: &KernelVars, inducing_inputs: Option<Var>, h: Var) -> Result<Var> {
        let z = require_inputs(inducing_inputs)?;
        gram_on_tape(tape, kernel.family, z, h, kernel.log_variance, kernel.log_lengthscale)
    }
}

/// Inducing variables as RKHS projections onto a Fourier basis, with one
/// shared constant feature and `2M` features per input dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFeatures {
    pub interval: Interval,
    pub frequencies: usize,
}

impl InducingFeature for SpectralFeatures {
    fn kind(&self) -> &'static str {
        "spectral"
    }

    fn num_inducing(&self, input_dim: usize) -> usize {
        2 * self.frequencies * input_dim + 1
    }

    fn kuu(&self, tape: &mut Tape, kernel: &KernelVars, _inducing_inputs: Option<Var>) -> Result<Var> {
        vff_kuu_on_tape(tape, self.interval, self.frequencies, kernel.family, kernel.log_variance, kernel.log_lengthscale)
    }

    fn kuf(&self, tape: &mut Tape, _kernel: &KernelVars, _inducing_inputs: Option<Var>, h: Var) -> Result<Var> {
        vff_kuf_on_tape(tape, self.interval, self.frequencies, h)
    }
}
