//! Deep GP built from sparse variational layers, with per-layer input
//! normalization and reparameterized sampling between layers.
//!
//! Layer `l` stores its trainables under `layer{l}.*`; the Gaussian
//! likelihood noise lives in `likelihood.log_noise`.

mod checkpoint;
mod normalizer;
mod predict;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use normalizer::{normalize, Mode, NormalizerState, EMA_DECAY};
pub use predict::{predict_density, sample_forward, sample_forward_with_noise, LayerSample, Predictive};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{AdditiveKernel, MaternFamily};
use crate::numerics::{Matrix, Rng};
use crate::sparse_gp::{
    kmeans_init, InducingFeature, KernelVars, LayerCache, LayerVars, LocalPoints, SpectralFeatures, VariationalBlock,
    VARIANCE_FLOOR,
};
use crate::vff::Interval;

/// Parameter slot names.
pub mod slots {
    pub const LIKELIHOOD_LOG_NOISE: &str = "likelihood.log_noise";

    pub fn kernel_log_variance(l: usize) -> String {
        format!("layer{l}.kernel.log_variance")
    }
    pub fn kernel_log_lengthscale(l: usize) -> String {
        format!("layer{l}.kernel.log_lengthscale")
    }
    pub fn log_noise(l: usize) -> String {
        format!("layer{l}.log_noise")
    }
    pub fn q_mu(l: usize) -> String {
        format!("layer{l}.q_mu")
    }
    pub fn q_sqrt(l: usize, d: usize) -> String {
        format!("layer{l}.q_sqrt.{d}")
    }
    pub fn inducing_inputs(l: usize) -> String {
        format!("layer{l}.inducing_inputs")
    }
}

/// Which inducing variables each layer uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureSpec {
    /// Fourier features with `frequencies` frequencies per input dimension.
    Spectral { frequencies: usize },
    /// `points` inducing inputs, initialized by k-means.
    Local {
        points: usize,
        #[serde(default = "default_local_jitter")]
        jitter: f64,
    },
}

fn default_local_jitter() -> f64 {
    LocalPoints::DEFAULT_JITTER
}

impl FeatureSpec {
    pub fn build(&self, interval: Interval) -> Box<dyn InducingFeature> {
        match *self {
            FeatureSpec::Spectral { frequencies } => Box::new(SpectralFeatures { interval, frequencies }),
            FeatureSpec::Local { points, jitter } => Box::new(LocalPoints { count: points, jitter }),
        }
    }

    /// Frequencies or inducing points, whichever applies.
    pub fn size(&self) -> usize {
        match *self {
            FeatureSpec::Spectral { frequencies } => frequencies,
            FeatureSpec::Local { points, .. } => points,
        }
    }
}

/// Initial values for the trainables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Total prior variance of each layer, split evenly over input dims.
    pub kernel_variance: f64,
    pub lengthscale: f64,
    pub likelihood_noise: f64,
    pub inter_layer_noise: f64,
    /// Variational covariance scale at inner layers; the final layer uses 1.
    pub inner_covariance: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            kernel_variance: 1.0,
            lengthscale: 0.2,
            likelihood_noise: 0.05,
            inter_layer_noise: 1e-4,
            inner_covariance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub input_dim: usize,
    /// Output width of each layer; the last must be 1.
    pub widths: Vec<usize>,
    pub family: MaternFamily,
    pub feature: FeatureSpec,
    pub interval: Interval,
    #[serde(default)]
    pub init: InitConfig,
}

impl Topology {
    /// `layers` layers whose hidden widths equal the input dimension.
    pub fn new(input_dim: usize, layers: usize, family: MaternFamily, feature: FeatureSpec) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config("layers", "need at least one layer"));
        }
        let mut widths = vec![input_dim; layers - 1];
        widths.push(1);
        let t = Topology {
            input_dim,
            widths,
            family,
            feature,
            interval: Interval::new(-2.0, 3.0)?,
            init: InitConfig::default(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    /// `(input width, output width)` of layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let din = if l == 0 { self.input_dim } else { self.widths[l - 1] };
        (din, self.widths[l])
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::config("layers", "need at least one layer"));
        }
        if self.input_dim == 0 || self.widths.contains(&0) {
            return Err(Error::config("widths", "layer widths must be positive"));
        }
        if *self.widths.last().expect("non-empty") != 1 {
            return Err(Error::config("widths", "the final layer must have one output"));
        }
        if self.feature.size() == 0 {
            return Err(Error::config("frequencies", "need at least one frequency or inducing point"));
        }
        if matches!(self.feature, FeatureSpec::Spectral { .. }) && self.family == MaternFamily::FiveHalf {
            return Err(Error::config("kernel", "Fourier features support matern12 and matern32 only"));
        }
        if !(self.interval.a() < 0.0 && self.interval.b() > 1.0) {
            return Err(Error::config("interval", "the interval must contain [0, 1] in its interior"));
        }
        let i = &self.init;
        for (name, v) in [
            ("init.kernel_variance", i.kernel_variance),
            ("init.lengthscale", i.lengthscale),
            ("init.likelihood_noise", i.likelihood_noise),
            ("init.inter_layer_noise", i.inter_layer_noise),
            ("init.inner_covariance", i.inner_covariance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be positive"));
            }
        }
        Ok(())
    }
}

/// One layer's outputs on a tape. `sample` is absent without noise draws.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub mean: Var,
    pub var: Var,
    pub sample: Var,
}

pub struct TapeForward {
    pub layers: Vec<LayerOutput>,
    pub kl: Var,
    /// Monte Carlo copies stacked in the final layer's rows.
    pub samples: usize,
}

impl TapeForward {
    pub fn last(&self) -> LayerOutput {
        *self.layers.last().expect("at least one layer")
    }
}

pub struct DgpModel {
    topology: Topology,
    features: Vec<Box<dyn InducingFeature>>,
    pub params: ParamSet,
    pub normalizers: Vec<NormalizerState>,
    pub seed: u64,
}

impl std::fmt::Debug for DgpModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DgpModel").field("topology", &self.topology).field("slots", &self.params.len()).finish()
    }
}

impl Clone for DgpModel {
    fn clone(&self) -> Self {
        DgpModel::from_parts(self.topology.clone(), self.params.clone(), self.normalizers.clone(), self.seed)
            .expect("a valid model clones into a valid model")
    }
}

impl DgpModel {
    /// Builds and initializes a model for training inputs `x` (already in
    /// `[0, 1]`). Hidden-layer normalizers are warmed up with one pass.
    pub fn new(topology: Topology, x: &Matrix, seed: u64) -> Result<Self> {
        topology.validate()?;
        if x.cols() != topology.input_dim {
            return Err(Error::shape("model", format!("inputs have {} columns, topology expects {}", x.cols(), topology.input_dim)));
        }
        if x.rows() == 0 {
            return Err(Error::Empty("training inputs"));
        }
        let rng = Rng::new(seed);
        let params = init_params(&topology, x, &mut rng.child(0))?;
        let layers = topology.num_layers();
        let mut normalizers = vec![NormalizerState::unit(topology.input_dim)];
        for l in 1..layers {
            normalizers.push(NormalizerState::running(topology.layer_dims(l).0));
        }
        let mut model = DgpModel::from_parts(topology, params, normalizers, seed)?;
        if layers > 1 {
            let mut norms = model.normalizers.clone();
            let noise = model.noise_draws(x.rows(), 1, &mut rng.child(1));
            let mut tape = Tape::new();
            let b = model.params.bind(&mut tape, false);
            model.forward_on_tape(&mut tape, &b, x, 1, Some(&noise), &mut norms, Mode::Train)?;
            model.normalizers = norms;
        }
        Ok(model)
    }

    /// Reassembles a model, checking every slot against the topology.
    pub fn from_parts(topology: Topology, params: ParamSet, normalizers: Vec<NormalizerState>, seed: u64) -> Result<Self> {
        topology.validate()?;
        let expected = expected_shapes(&topology);
        if params.len() != expected.len() {
            return Err(Error::shape("model", format!("{} slots, topology needs {}", params.len(), expected.len())));
        }
        for (name, shape) in &expected {
            let got = params.require(name)?.shape();
            if got != *shape {
                return Err(Error::shape("model", format!("slot `{name}` is {got:?}, expected {shape:?}")));
            }
        }
        if normalizers.len() != topology.num_layers() {
            return Err(Error::shape("model", "one normalizer per layer required"));
        }
        let features = (0..topology.num_layers()).map(|_| topology.feature.build(topology.interval)).collect();
        Ok(DgpModel { topology, features, params, normalizers, seed })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn num_layers(&self) -> usize {
        self.topology.num_layers()
    }

    pub fn feature(&self, l: usize) -> &dyn InducingFeature {
        self.features[l].as_ref()
    }

    pub fn likelihood_noise(&self) -> f64 {
        self.params.get(slots::LIKELIHOOD_LOG_NOISE).map_or(f64::NAN, |m| m.data()[0].exp())
    }

    pub fn kernel(&self, l: usize) -> Result<AdditiveKernel> {
        AdditiveKernel::from_log_params(
            self.topology.family,
            self.params.require(&slots::kernel_log_variance(l))?,
            self.params.require(&slots::kernel_log_lengthscale(l))?,
        )
    }

    /// Variational parameters of layer `l` as plain values.
    pub fn variational_block(&self, l: usize) -> Result<VariationalBlock> {
        let (_, dout) = self.topology.layer_dims(l);
        let q_sqrt = (0..dout).map(|d| self.params.require(&slots::q_sqrt(l, d)).cloned()).collect::<Result<_>>()?;
        VariationalBlock::new(self.params.require(&slots::q_mu(l))?.clone(), q_sqrt)
    }

    /// Noise added between layers at layer `l`; zero for the final layer.
    pub fn inter_layer_noise(&self, l: usize) -> f64 {
        self.params.get(&slots::log_noise(l)).map_or(0.0, |m| m.data()[0].exp())
    }

    /// Fixed linear mean weights of inner layers: identity, truncated or
    /// zero-padded when widths differ. The final layer has none.
    pub fn mean_weights(&self, l: usize) -> Option<Matrix> {
        if l + 1 == self.num_layers() {
            return None;
        }
        let (din, dout) = self.topology.layer_dims(l);
        Some(Matrix::from_fn(din, dout, |i, j| if i == j { 1.0 } else { 0.0 }))
    }

    /// Standard normal draws for every layer, in layer order, each
    /// `(samples · n) x width`.
    pub fn noise_draws(&self, n: usize, samples: usize, rng: &mut Rng) -> Vec<Matrix> {
        self.noise_draws_for(n, samples, rng, self.num_layers())
    }

    fn noise_draws_for(&self, n: usize, samples: usize, rng: &mut Rng, layers: usize) -> Vec<Matrix> {
        self.topology
            .widths
            .iter()
            .take(layers)
            .map(|&w| Matrix::from_vec(samples * n, w, rng.standard_normal(samples * n * w)).expect("sized draw"))
            .collect()
    }

    /// Draws for every layer but the last, whose moments are used directly.
    pub fn inner_noise_draws(&self, n: usize, samples: usize, rng: &mut Rng) -> Vec<Matrix> {
        self.noise_draws_for(n, samples, rng, self.num_layers() - 1)
    }

    fn layer_vars(&self, b: &Bindings, l: usize) -> Result<LayerVars> {
        let (_, dout) = self.topology.layer_dims(l);
        let inner = l + 1 < self.num_layers();
        Ok(LayerVars {
            kernel: KernelVars {
                family: self.topology.family,
                log_variance: b.get(&slots::kernel_log_variance(l))?,
                log_lengthscale: b.get(&slots::kernel_log_lengthscale(l))?,
            },
            inducing_inputs: if self.features[l].has_inducing_inputs() {
                Some(b.get(&slots::inducing_inputs(l))?)
            } else {
                None
            },
            q_mu: b.get(&slots::q_mu(l))?,
            q_sqrt: (0..dout).map(|d| b.get(&slots::q_sqrt(l, d))).collect::<Result<_>>()?,
            log_delta_noise: if inner { Some(b.get(&slots::log_noise(l))?) } else { None },
        })
    }

    /// Propagates `x` through every layer on `tape`.
    ///
    /// The first layer is evaluated once on the `n` inputs and tiled to
    /// `samples · n` rows (sample-major) when deeper layers follow. Without
    /// `noise` every sample equals its layer mean; the final layer's draws
    /// may be omitted when only its moments are needed.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x: &Matrix,
        samples: usize,
        noise: Option<&[Matrix]>,
        normalizers: &mut [NormalizerState],
        mode: Mode,
    ) -> Result<TapeForward> {
        let n = x.rows();
        let layers = self.num_layers();
        if n == 0 {
            return Err(Error::Empty("inputs"));
        }
        if samples == 0 {
            return Err(Error::Invalid("need at least one sample".into()));
        }
        if x.cols() != self.topology.input_dim {
            return Err(Error::shape("forward", format!("inputs have {} columns, model expects {}", x.cols(), self.topology.input_dim)));
        }
        if let Some(eps) = noise {
            let ok = (eps.len() == layers || eps.len() + 1 == layers)
                && eps.iter().zip(&self.topology.widths).all(|(e, &w)| e.shape() == (samples * n, w));
            if !ok {
                return Err(Error::shape("forward", "noise draws do not match samples, inputs and widths"));
            }
        }
        let h0 = normalizers[0].apply(x, mode);
        let mut current = tape.constant(h0);
        let mut outputs = Vec::with_capacity(layers);
        let mut kl: Option<Var> = None;
        for l in 0..layers {
            let h = if l == 0 { current } else { normalizers[l].apply_on_tape(tape, current, mode)? };
            let vars = self.layer_vars(b, l)?;
            let feature = self.features[l].as_ref();
            let cache = LayerCache::build(tape, feature, &vars)?;
            let layer_kl = cache.kl(tape)?;
            kl = Some(match kl {
                Some(k) => tape.add(k, layer_kl)?,
                None => layer_kl,
            });
            let (mut mean, mut var) = cache.predict(tape, feature, &vars, h)?;
            if let Some(w) = self.mean_weights(l) {
                let w = tape.constant(w);
                let mf = tape.matmul(h, w)?;
                mean = tape.add(mean, mf)?;
            }
            if l == 0 && layers > 1 && samples > 1 {
                mean = tape.tile_rows(mean, samples);
                var = tape.tile_rows(var, samples);
            }
            let sample = match noise.and_then(|eps| eps.get(l)) {
                Some(eps) => {
                    let (m, v) = if tape.value(mean).rows() == samples * n {
                        (mean, var)
                    } else {
                        (tape.tile_rows(mean, samples), tape.tile_rows(var, samples))
                    };
                    let v = tape.clamp_min(v, VARIANCE_FLOOR);
                    let sd = tape.sqrt(v);
                    let e = tape.constant(eps.clone());
                    let step = tape.mul(e, sd)?;
                    tape.add(m, step)?
                }
                None => mean,
            };
            outputs.push(LayerOutput { mean, var, sample });
            current = sample;
        }
        let rows = tape.value(outputs.last().expect("at least one layer").mean).rows();
        Ok(TapeForward { layers: outputs, kl: kl.expect("at least one layer"), samples: rows / n })
    }
}

/// Slot names and shapes implied by a topology, in insertion order.
pub fn expected_shapes(t: &Topology) -> Vec<(String, (usize, usize))> {
    let mut out = vec![(slots::LIKELIHOOD_LOG_NOISE.to_string(), (1, 1))];
    let layers = t.num_layers();
    for l in 0..layers {
        let (din, dout) = t.layer_dims(l);
        let feature = t.feature.build(t.interval);
        let m = feature.num_inducing(din);
        out.push((slots::kernel_log_variance(l), (din, 1)));
        out.push((slots::kernel_log_lengthscale(l), (din, 1)));
        if l + 1 < layers {
            out.push((slots::log_noise(l), (1, 1)));
        }
        if feature.has_inducing_inputs() {
            out.push((slots::inducing_inputs(l), (m, din)));
        }
        out.push((slots::q_mu(l), (m, dout)));
        for d in 0..dout {
            out.push((slots::q_sqrt(l, d), (m, m)));
        }
    }
    out
}

fn rescale_unit(x: &Matrix) -> Matrix {
    let mut state = NormalizerState::running(x.cols());
    state.apply(x, Mode::Train)
}

fn init_params(t: &Topology, x: &Matrix, rng: &mut Rng) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    let layers = t.num_layers();
    // Inputs seen by each layer when every layer returns its mean function.
    let mut layer_input = x.map(|v| v.clamp(0.0, 1.0));
    for (name, shape) in expected_shapes(t) {
        p.insert(name, Matrix::zeros(shape.0, shape.1));
    }
    p.insert(slots::LIKELIHOOD_LOG_NOISE, Matrix::scalar(t.init.likelihood_noise.ln()));
    for l in 0..layers {
        let (din, dout) = t.layer_dims(l);
        let feature = t.feature.build(t.interval);
        let m = feature.num_inducing(din);
        let per_dim = t.init.kernel_variance / din as f64;
        p.insert(slots::kernel_log_variance(l), Matrix::filled(din, 1, per_dim.ln()));
        p.insert(slots::kernel_log_lengthscale(l), Matrix::filled(din, 1, t.init.lengthscale.ln()));
        let inner = l + 1 < layers;
        if inner {
            p.insert(slots::log_noise(l), Matrix::scalar(t.init.inter_layer_noise.ln()));
        }
        if feature.has_inducing_inputs() {
            let z = kmeans_init(&layer_input, m, &mut rng.child(l as u64))?;
            p.insert(slots::inducing_inputs(l), z);
        }
        let scale = if inner { t.init.inner_covariance } else { 1.0 };
        for d in 0..dout {
            p.insert(slots::q_sqrt(l, d), Matrix::identity(m).scale(scale.sqrt()));
        }
        if inner {
            let w = Matrix::from_fn(din, dout, |i, j| if i == j { 1.0 } else { 0.0 });
            layer_input = rescale_unit(&layer_input.matmul(&w)?);
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests;
