use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::numerics::{log_normal_pdf, logsumexp, Matrix, Rng};

use super::{DgpModel, Mode};

/// Test points propagated together in one forward pass.
const CHUNK_ROWS: usize = 512;

/// Plain values of one layer after a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSample {
    pub mean: Matrix,
    pub variance: Matrix,
    pub sample: Matrix,
}

/// Propagates `samples` Monte Carlo copies of `x` with fresh noise from `rng`.
pub fn sample_forward(model: &mut DgpModel, x: &Matrix, samples: usize, rng: &mut Rng, mode: Mode) -> Result<Vec<LayerSample>> {
    let noise = model.noise_draws(x.rows(), samples, rng);
    sample_forward_with_noise(model, x, samples, Some(&noise), mode)
}

/// Forward pass with caller-supplied noise; `None` propagates layer means.
pub fn sample_forward_with_noise(
    model: &mut DgpModel,
    x: &Matrix,
    samples: usize,
    noise: Option<&[Matrix]>,
    mode: Mode,
) -> Result<Vec<LayerSample>> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let mut norms = std::mem::take(&mut model.normalizers);
    let out = model.forward_on_tape(&mut tape, &b, x, samples, noise, &mut norms, mode);
    model.normalizers = norms;
    Ok(out?
        .layers
        .iter()
        .map(|o| LayerSample {
            mean: tape.value(o.mean).clone(),
            variance: tape.value(o.var).clone(),
            sample: tape.value(o.sample).clone(),
        })
        .collect())
}

/// Predictive moments of the noisy output and, when targets are given, the
/// log density of each target under the Monte Carlo mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictive {
    pub mean: Vec<f64>,
    /// Variance of the noisy observation.
    pub variance: Vec<f64>,
    pub log_density: Option<Vec<f64>>,
}

/// Mixture predictive with `samples` components per test point, in eval mode.
pub fn predict_density(
    model: &mut DgpModel,
    x: &Matrix,
    y: Option<&[f64]>,
    samples: usize,
    rng: &mut Rng,
) -> Result<Predictive> {
    let n = x.rows();
    if let Some(y) = y {
        if y.len() != n {
            return Err(Error::shape("predict", format!("{} targets for {n} inputs", y.len())));
        }
    }
    let noise_var = model.likelihood_noise();
    let mut mean = Vec::with_capacity(n);
    let mut variance = Vec::with_capacity(n);
    let mut log_density = y.map(|_| Vec::with_capacity(n));
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK_ROWS).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let xc = x.select_rows(&rows);
        let layers = sample_forward(model, &xc, samples, rng, Mode::Eval)?;
        let last = layers.last().expect("at least one layer");
        let k = end - start;
        let copies = last.mean.rows() / k;
        let mut comp = Vec::with_capacity(copies);
        for i in 0..k {
            let (mut m1, mut m2, mut v1) = (0.0, 0.0, 0.0);
            for s in 0..copies {
                let r = s * k + i;
                let (m, v) = (last.mean[(r, 0)], last.variance[(r, 0)].max(0.0));
                m1 += m;
                m2 += m * m;
                v1 += v;
            }
            let c = copies as f64;
            let mu = m1 / c;
            mean.push(mu);
            variance.push(v1 / c + (m2 / c - mu * mu).max(0.0) + noise_var);
            if let (Some(out), Some(y)) = (log_density.as_mut(), y) {
                comp.clear();
                for s in 0..copies {
                    let r = s * k + i;
                    comp.push(log_normal_pdf(y[start + i], last.mean[(r, 0)], last.variance[(r, 0)].max(0.0) + noise_var));
                }
                out.push(logsumexp(&comp)? - c.ln());
            }
        }
        start = end;
    }
    Ok(Predictive { mean, variance, log_density })
}
