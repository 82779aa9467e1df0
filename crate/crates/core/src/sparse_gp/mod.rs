//! Single-layer sparse variational GP: predictive marginals, the Gaussian
//! KL against the inducing prior, and the uncollapsed ELBO, for any
//! [`InducingFeature`].
//!
//! The parameterization is non-whitened with `q(u_d) = N(μ_d, R_d R_dᵀ)`
//! and a zero inducing prior mean; the mean function is added outside.

mod features;
mod kmeans;

pub use features::{InducingFeature, KernelVars, LocalPoints, SpectralFeatures};
pub use kmeans::kmeans_init;

use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{kff_diag_on_tape, AdditiveKernel, MaternFamily};
use crate::numerics::{Matrix, TriSide};

/// Variances below this are clamped before taking square roots.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Variational posterior over one layer's inducing variables.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalBlock {
    /// `M′ x D_out` means, one column per output.
    pub q_mu: Matrix,
    /// One lower-triangular `M′ x M′` factor per output; entries above the
    /// diagonal are ignored.
    pub q_sqrt: Vec<Matrix>,
}

impl VariationalBlock {
    pub fn new(q_mu: Matrix, q_sqrt: Vec<Matrix>) -> Result<Self> {
        if q_sqrt.len() != q_mu.cols() {
            return Err(Error::shape("variational block", format!("{} means vs {} factors", q_mu.cols(), q_sqrt.len())));
        }
        for r in &q_sqrt {
            if r.shape() != (q_mu.rows(), q_mu.rows()) {
                return Err(Error::shape("variational block", format!("factor {:?} for {} inducing", r.shape(), q_mu.rows())));
            }
        }
        Ok(VariationalBlock { q_mu, q_sqrt })
    }

    /// Zero mean and covariance `scale · I`.
    pub fn isotropic(num_inducing: usize, outputs: usize, scale: f64) -> Self {
        let r = Matrix::identity(num_inducing).scale(scale.sqrt());
        VariationalBlock { q_mu: Matrix::zeros(num_inducing, outputs), q_sqrt: vec![r; outputs] }
    }

    pub fn num_inducing(&self) -> usize {
        self.q_mu.rows()
    }

    pub fn outputs(&self) -> usize {
        self.q_mu.cols()
    }

    pub fn covariance(&self, d: usize) -> Result<Matrix> {
        let r = self.q_sqrt[d].lower_triangle();
        r.matmul_nt(&r)
    }
}

/// Tape handles for one layer's kernel and variational parameters.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub kernel: KernelVars,
    pub inducing_inputs: Option<Var>,
    pub q_mu: Var,
    /// Raw factors; the lower triangle is taken on the tape.
    pub q_sqrt: Vec<Var>,
    /// Log of the noise added on the layer's own `Kff` diagonal.
    pub log_delta_noise: Option<Var>,
}

/// Quantities shared between a layer's predictions and its KL term.
pub struct LayerCache {
    chol: Var,
    /// `L⁻¹ μ`.
    alpha: Var,
    /// `L⁻¹ R_d`.
    scaled_factors: Vec<Var>,
    factors: Vec<Var>,
    num_inducing: usize,
}

impl LayerCache {
    pub fn build(tape: &mut Tape, feature: &dyn InducingFeature, vars: &LayerVars) -> Result<LayerCache> {
        let kuu = feature.kuu(tape, &vars.kernel, vars.inducing_inputs)?;
        let chol = tape.cholesky(kuu)?;
        LayerCache::from_cholesky(tape, chol, vars.q_mu, &vars.q_sqrt)
    }

    fn from_cholesky(tape: &mut Tape, chol: Var, q_mu: Var, q_sqrt: &[Var]) -> Result<LayerCache> {
        let num_inducing = tape.value(chol).rows();
        if tape.value(q_mu).shape() != (num_inducing, q_sqrt.len()) {
            return Err(Error::shape(
                "layer",
                format!("q_mu is {:?}, expected {num_inducing} x {}", tape.value(q_mu).shape(), q_sqrt.len()),
            ));
        }
        let alpha = tape.tri_solve(chol, q_mu, TriSide::Lower)?;
        let mut factors = Vec::with_capacity(q_sqrt.len());
        let mut scaled_factors = Vec::with_capacity(q_sqrt.len());
        for &r in q_sqrt {
            let r = tape.tril(r);
            scaled_factors.push(tape.tri_solve(chol, r, TriSide::Lower)?);
            factors.push(r);
        }
        Ok(LayerCache { chol, alpha, scaled_factors, factors, num_inducing })
    }

    /// Marginal predictive means and variances (`N x D_out` each) at the
    /// rows of `h`, before the mean function.
    pub fn predict(
        &self,
        tape: &mut Tape,
        feature: &dyn InducingFeature,
        vars: &LayerVars,
        h: Var,
    ) -> Result<(Var, Var)> {
        let n = tape.value(h).rows();
        let kuf = feature.kuf(tape, &vars.kernel, vars.inducing_inputs, h)?;
        if tape.value(kuf).rows() != self.num_inducing {
            return Err(Error::shape("layer", "Kuf and Kuu disagree on the number of inducing variables"));
        }
        let a = tape.tri_solve(self.chol, kuf, TriSide::Lower)?;
        let mean = tape.matmul_tn(a, self.alpha)?;

        let mut kff = kff_diag_on_tape(tape, vars.kernel.log_variance, n)?;
        if let Some(ln) = vars.log_delta_noise {
            let noise = tape.exp(ln);
            kff = tape.add_scalar(kff, noise)?;
        }
        let a2 = tape.square(a);
        let qff = tape.sum_rows(a2);
        let qff = tape.transpose(qff);
        let base = tape.sub(kff, qff)?;
        let mut columns = Vec::with_capacity(self.scaled_factors.len());
        for &c in &self.scaled_factors {
            let b = tape.matmul_tn(c, a)?;
            let b2 = tape.square(b);
            let s = tape.sum_rows(b2);
            let s = tape.transpose(s);
            columns.push(tape.add(base, s)?);
        }
        let var = tape.hstack(&columns)?;
        Ok((mean, var))
    }

    /// `Σ_d KL(N(μ_d, R_d R_dᵀ) ‖ N(0, Kuu))`.
    pub fn kl(&self, tape: &mut Tape) -> Result<Var> {
        let outputs = self.factors.len() as f64;
        let d = tape.diag(self.chol)?;
        let logd = tape.log(d);
        let logdet_kuu = tape.sum(logd);
        // D_out · (logdet Kuu − M′), with logdet Kuu = 2 Σ log L_ii.
        let total = tape.scale(logdet_kuu, 2.0 * outputs);
        let mut total = tape.offset(total, -outputs * self.num_inducing as f64);
        let a2 = tape.square(self.alpha);
        let a2 = tape.sum(a2);
        total = tape.add(total, a2)?;
        for (&c, &r) in self.scaled_factors.iter().zip(&self.factors) {
            let c2 = tape.square(c);
            let c2 = tape.sum(c2);
            let rd = tape.diag(r)?;
            let rd2 = tape.square(rd);
            let lr = tape.log(rd2);
            let lr = tape.sum(lr);
            total = tape.add(total, c2)?;
            total = tape.sub(total, lr)?;
        }
        Ok(tape.scale(total, 0.5))
    }
}

/// `Σ_n E_q[log N(y_n | f_n, σ²)]` for Gaussian marginals `q(f_n) = N(mean, var)`.
pub fn expected_log_lik_on_tape(tape: &mut Tape, mean: Var, var: Var, y: Var, log_noise: Var) -> Result<Var> {
    let n = tape.value(mean).len() as f64;
    let r = tape.sub(y, mean)?;
    let r2 = tape.square(r);
    let t = tape.add(r2, var)?;
    let s = tape.sum(t);
    let neg = tape.scale(log_noise, -1.0);
    let inv_noise = tape.exp(neg);
    let quad = tape.scale_by(s, inv_noise)?;
    let quad = tape.scale(quad, -0.5);
    let logs = tape.scale(log_noise, -0.5 * n);
    let logs = tape.offset(logs, -0.5 * n * (2.0 * PI).ln());
    tape.add(quad, logs)
}

/// A layer described by plain values, for use outside a training tape.
#[derive(Clone, Copy)]
pub struct SparseLayer<'a> {
    pub feature: &'a dyn InducingFeature,
    pub kernel: &'a AdditiveKernel,
    pub inducing_inputs: Option<&'a Matrix>,
    /// Noise on exact index coincidence within `Kff`.
    pub delta_noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPrediction {
    pub mean: Matrix,
    pub variance: Matrix,
}

impl SparseLayer<'_> {
    fn family(&self) -> Result<MaternFamily> {
        let family = self.kernel.components[0].family;
        if self.kernel.components.iter().any(|c| c.family != family) {
            return Err(Error::Invalid("all kernel components must share one Matérn family".into()));
        }
        Ok(family)
    }

    fn bind(&self, tape: &mut Tape, vb: &VariationalBlock) -> Result<LayerVars> {
        let comps = &self.kernel.components;
        let lv = Matrix::column_vector(comps.iter().map(|c| c.variance.ln()).collect());
        let ll = Matrix::column_vector(comps.iter().map(|c| c.lengthscale.ln()).collect());
        let kernel = KernelVars { family: self.family()?, log_variance: tape.constant(lv), log_lengthscale: tape.constant(ll) };
        let inducing_inputs = self.inducing_inputs.map(|z| tape.constant(z.clone()));
        let log_delta_noise = (self.delta_noise > 0.0).then(|| tape.constant(Matrix::scalar(self.delta_noise.ln())));
        Ok(LayerVars {
            kernel,
            inducing_inputs,
            q_mu: tape.constant(vb.q_mu.clone()),
            q_sqrt: vb.q_sqrt.iter().map(|r| tape.constant(r.clone())).collect(),
            log_delta_noise,
        })
    }

    pub fn kuu(&self) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, &VariationalBlock::isotropic(0, 0, 1.0))?;
        let k = self.feature.kuu(&mut tape, &vars.kernel, vars.inducing_inputs)?;
        Ok(tape.value(k).clone())
    }

    pub fn kuf(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, &VariationalBlock::isotropic(0, 0, 1.0))?;
        let h = tape.constant(x.clone());
        let k = self.feature.kuf(&mut tape, &vars.kernel, vars.inducing_inputs, h)?;
        Ok(tape.value(k).clone())
    }
}

fn check_inputs(layer: &SparseLayer<'_>, x: &Matrix) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Empty("layer inputs"));
    }
    if x.cols() != layer.kernel.components.len() {
        return Err(Error::shape(
            "layer",
            format!("inputs have {} columns, kernel has {} dims", x.cols(), layer.kernel.components.len()),
        ));
    }
    Ok(())
}

/// Marginal predictive means and variances at the rows of `x`. `mean_fn`
/// holds the mean function's values there (`N x D_out`).
pub fn layer_predict(
    layer: &SparseLayer<'_>,
    vb: &VariationalBlock,
    x: &Matrix,
    mean_fn: Option<&Matrix>,
) -> Result<LayerPrediction> {
    check_inputs(layer, x)?;
    let mut tape = Tape::new();
    let vars = layer.bind(&mut tape, vb)?;
    let cache = LayerCache::build(&mut tape, layer.feature, &vars)?;
    let h = tape.constant(x.clone());
    let (mut mean, var) = cache.predict(&mut tape, layer.feature, &vars, h)?;
    if let Some(mf) = mean_fn {
        let mf = tape.constant(mf.clone());
        mean = tape.add(mean, mf)?;
    }
    Ok(LayerPrediction { mean: tape.value(mean).clone(), variance: tape.value(var).clone() })
}

/// `Σ_d KL(N(μ_d, Σ_d) ‖ N(0, Kuu))`.
pub fn kl_gaussian(vb: &VariationalBlock, kuu: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let k = tape.constant(kuu.clone());
    let chol = tape.cholesky(k)?;
    let q_mu = tape.constant(vb.q_mu.clone());
    let q_sqrt: Vec<Var> = vb.q_sqrt.iter().map(|r| tape.constant(r.clone())).collect();
    let cache = LayerCache::from_cholesky(&mut tape, chol, q_mu, &q_sqrt)?;
    let kl = cache.kl(&mut tape)?;
    tape.scalar(kl)
}

/// Single-layer ELBO: `scale · Σ_n E_q[log N(y_n | f_n, σ²)] − KL`.
pub fn svgp_elbo(
    layer: &SparseLayer<'_>,
    vb: &VariationalBlock,
    x: &Matrix,
    y: &Matrix,
    mean_fn: Option<&Matrix>,
    noise: f64,
    scale: f64,
) -> Result<f64> {
    check_inputs(layer, x)?;
    if y.shape() != (x.rows(), 1) || vb.outputs() != 1 {
        return Err(Error::shape("svgp_elbo", "expects one output and y of shape N x 1"));
    }
    let mut tape = Tape::new();
    let vars = layer.bind(&mut tape, vb)?;
    let cache = LayerCache::build(&mut tape, layer.feature, &vars)?;
    let h = tape.constant(x.clone());
    let (mut mean, var) = cache.predict(&mut tape, layer.feature, &vars, h)?;
    if let Some(mf) = mean_fn {
        let mf = tape.constant(mf.clone());
        mean = tape.add(mean, mf)?;
    }
    let yv = tape.constant(y.clone());
    let ln = tape.constant(Matrix::scalar(noise.ln()));
    let ell = expected_log_lik_on_tape(&mut tape, mean, var, yv, ln)?;
    let kl = cache.kl(&mut tape)?;
    Ok(tape.scalar(ell)? * scale - tape.scalar(kl)?)
}
