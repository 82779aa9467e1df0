//! ELBO assembly and the minibatch Adam training loop.

mod adam;

pub use adam::{adam_step, AdamState};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{gradcheck, gradient_with, Bindings, GradientReport, ParamSet, Tape, Var};
use crate::dgp::{save_checkpoint, slots, DgpModel, Mode, NormalizerState};
use crate::error::{Error, Result};
use crate::numerics::{JitterPolicy, Matrix, Rng};
use crate::sparse_gp::expected_log_lik_on_tape;

pub const DEFAULT_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Minibatch size, capped at the number of training points.
    pub batch_size: usize,
    /// Monte Carlo samples per ELBO estimate.
    pub samples: usize,
    pub seed: u64,
    pub jitter: JitterPolicy,
    /// Slot names (or `prefix.` prefixes) held fixed during training.
    pub frozen: Vec<String>,
    /// Save a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            iterations: 1000,
            batch_size: DEFAULT_BATCH,
            samples: 5,
            seed: 0,
            jitter: JitterPolicy::default(),
            frozen: Vec::new(),
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.samples == 0 {
            return Err(Error::config("samples", "need at least one sample"));
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return Err(Error::config("checkpoint_path", "required when checkpoint_every is set"));
        }
        Ok(())
    }

    fn is_frozen(&self, slot: &str) -> bool {
        self.frozen.iter().any(|f| slot == f || (f.ends_with('.') && slot.starts_with(f.as_str())))
    }
}

/// Terms of the bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub elbo: Var,
    pub expected_log_lik: Var,
    pub kl: Var,
}

/// `scale · (1/S) Σ_s Σ_n E[log N(y_n | f_n, σ²)] − Σ KL`, with the final
/// layer's Gaussian marginalized in closed form given inner-layer draws.
#[allow(clippy::too_many_arguments)]
pub fn elbo_on_tape(
    model: &DgpModel,
    tape: &mut Tape,
    b: &Bindings,
    x: &Matrix,
    y: &Matrix,
    scale: f64,
    samples: usize,
    noise: &[Matrix],
    normalizers: &mut [NormalizerState],
    mode: Mode,
) -> Result<ElboTerms> {
    if y.shape() != (x.rows(), 1) {
        return Err(Error::shape("elbo", format!("targets are {:?}, expected ({}, 1)", y.shape(), x.rows())));
    }
    let fwd = model.forward_on_tape(tape, b, x, samples, Some(noise), normalizers, mode)?;
    let last = fwd.last();
    let yv = tape.constant(y.tile_rows(fwd.samples));
    let log_noise = b.get(slots::LIKELIHOOD_LOG_NOISE)?;
    let ell = expected_log_lik_on_tape(tape, last.mean, last.var, yv, log_noise)?;
    let ell = tape.scale(ell, scale / fwd.samples as f64);
    let elbo = tape.sub(ell, fwd.kl)?;
    Ok(ElboTerms { elbo, expected_log_lik: ell, kl: fwd.kl })
}

/// Monte Carlo ELBO estimate with frozen normalizer statistics.
pub fn elbo(model: &DgpModel, x: &Matrix, y: &Matrix, scale: f64, samples: usize, rng: &mut Rng) -> Result<f64> {
    let noise = model.inner_noise_draws(x.rows(), samples, rng);
    let mut norms = model.normalizers.clone();
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let terms = elbo_on_tape(model, &mut tape, &b, x, y, scale, samples, &noise, &mut norms, Mode::Eval)?;
    tape.scalar(terms.elbo)
}

/// Total KL of the model's variational posteriors from their priors.
pub fn kl_divergence(model: &DgpModel, x: &Matrix) -> Result<f64> {
    let mut norms = model.normalizers.clone();
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let fwd = model.forward_on_tape(&mut tape, &b, x, 1, None, &mut norms, Mode::Eval)?;
    tape.scalar(fwd.kl)
}

/// Gradient check of the full training objective at fixed noise draws and
/// frozen normalizer statistics.
pub fn gradcheck_elbo(
    model: &DgpModel,
    x: &Matrix,
    y: &Matrix,
    samples: usize,
    rng: &mut Rng,
    h: f64,
) -> Result<Vec<GradientReport>> {
    let noise = model.inner_noise_draws(x.rows(), samples, rng);
    gradcheck(
        &model.params,
        |tape, b| {
            let mut norms = model.normalizers.clone();
            Ok(elbo_on_tape(model, tape, b, x, y, 1.0, samples, &noise, &mut norms, Mode::Eval)?.elbo)
        },
        h,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub elbo: f64,
    /// Wall time since training started.
    pub seconds: f64,
    pub lr: f64,
    pub param_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn elbos(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.elbo).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

fn param_norm(p: &ParamSet) -> f64 {
    p.iter().flat_map(|(_, m)| m.data().iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Cycles through shuffled epochs without replacement.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: Rng,
}

impl Batcher {
    fn next(&mut self) -> Vec<usize> {
        if self.size == self.order.len() {
            return self.order.clone();
        }
        if self.pos + self.size > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

/// Maximizes the ELBO with Adam. On a non-finite ELBO or gradient the model
/// keeps its last good parameters (also checkpointed when a path is set)
/// and a [`Error::Divergence`] is returned.
pub fn train(model: &mut DgpModel, x: &Matrix, y: &[f64], cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    let n = x.rows();
    if n == 0 {
        return Err(Error::Empty("training data"));
    }
    if y.len() != n {
        return Err(Error::shape("train", format!("{} targets for {n} inputs", y.len())));
    }
    for f in &cfg.frozen {
        if !f.ends_with('.') && !model.params.contains(f) {
            return Err(Error::config("frozen", format!("unknown slot `{f}`")));
        }
    }
    let batch = cfg.batch_size.min(n);
    let scale = n as f64 / batch as f64;
    let root = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_rng = root.child(0);
    if batch < n {
        batch_rng.shuffle(&mut order);
    }
    let mut batcher = Batcher { order, pos: 0, size: batch, rng: batch_rng };
    let mut noise_rng = root.child(1);
    let mut adam = AdamState::new(&model.params);
    let mut trace = TrainTrace::default();
    let start = Instant::now();

    for iter in 0..cfg.iterations {
        let idx = batcher.next();
        let xb = x.select_rows(&idx);
        let yb = Matrix::column_vector(idx.iter().map(|&i| y[i]).collect());
        let noise = model.inner_noise_draws(batch, cfg.samples, &mut noise_rng);
        let mut norms = model.normalizers.clone();
        let result = gradient_with(&model.params, cfg.jitter, |tape, b| {
            let terms = elbo_on_tape(model, tape, b, &xb, &yb, scale, cfg.samples, &noise, &mut norms, Mode::Train)?;
            Ok(terms.elbo)
        });
        let (value, mut grads) = match result {
            Ok(v) => v,
            Err(Error::NonFinite(msg)) => {
                log::error!("non-finite objective at iteration {iter}: {msg}");
                return Err(diverged(model, cfg, iter, f64::NAN));
            }
            Err(e) => return Err(e),
        };
        for (name, g) in grads.iter_mut() {
            if cfg.is_frozen(name) {
                *g = Matrix::zeros(g.rows(), g.cols());
            }
        }
        let last_good = model.params.clone();
        adam_step(&mut adam, &mut model.params, &grads, cfg.learning_rate)?;
        if !model.params.is_finite() {
            model.params = last_good;
            return Err(diverged(model, cfg, iter, value));
        }
        model.normalizers = norms;
        trace.records.push(TraceRecord {
            iter,
            elbo: value,
            seconds: start.elapsed().as_secs_f64(),
            lr: cfg.learning_rate,
            param_norm: param_norm(&model.params),
        });
        if iter % 100 == 0 {
            log::debug!("iter {iter}: elbo {value:.4}");
        }
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            if let Some(path) = &cfg.checkpoint_path {
                save_checkpoint(model, path, None)?;
            }
        }
    }
    Ok(trace)
}

fn diverged(model: &DgpModel, cfg: &TrainConfig, iter: usize, value: f64) -> Error {
    if let Some(path) = &cfg.checkpoint_path {
        if let Err(e) = save_checkpoint(model, path, None) {
            log::error!("could not save the last good checkpoint: {e}");
        }
    }
    Error::Divergence { iter, value }
}

#[cfg(test)]
mod tests;
