use indexmap::IndexMap;

use crate::dgp::{FeatureSpec, Topology};
use crate::error::{Error, Result};
use crate::vff::Interval;

use super::config::ExperimentConfig;

/// A model family the experiment runner can build by name.
pub trait Method: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    fn spectral(&self) -> bool;
    /// `Some(1)` for shallow GPs.
    fn max_layers(&self) -> Option<usize>;
    fn default_layers(&self) -> usize;

    fn layers(&self, cfg: &ExperimentConfig) -> usize {
        cfg.layers.unwrap_or(self.default_layers())
    }

    fn validate(&self, cfg: &ExperimentConfig) -> Result<()> {
        let layers = self.layers(cfg);
        if layers == 0 {
            return Err(Error::config("layers", "need at least one layer"));
        }
        if let Some(max) = self.max_layers() {
            if layers > max {
                return Err(Error::config("layers", format!("method `{}` supports at most {max} layer(s), got {layers}", self.name())));
            }
        }
        Ok(())
    }

    fn feature(&self, cfg: &ExperimentConfig) -> FeatureSpec {
        if self.spectral() {
            FeatureSpec::Spectral { frequencies: cfg.frequencies }
        } else {
            FeatureSpec::Local { points: cfg.frequencies, jitter: cfg.local_jitter }
        }
    }

    fn topology(&self, cfg: &ExperimentConfig, input_dim: usize) -> Result<Topology> {
        self.validate(cfg)?;
        let mut t = Topology::new(input_dim, self.layers(cfg), cfg.kernel, self.feature(cfg))?;
        t.interval = Interval::new(cfg.interval[0], cfg.interval[1])?;
        t.init = cfg.init.clone();
        t.validate()?;
        Ok(t)
    }
}

struct InterDomainDgp;
struct DsviDgp;
struct VffGp;
struct SviGp;

impl Method for InterDomainDgp {
    fn name(&self) -> &'static str {
        "id-dgp"
    }
    fn description(&self) -> &'static str {
        "deep GP with Fourier-feature inducing variables"
    }
    fn spectral(&self) -> bool {
        true
    }
    fn max_layers(&self) -> Option<usize> {
        None
    }
    fn default_layers(&self) -> usize {
        2
    }
}

impl Method for DsviDgp {
    fn name(&self) -> &'static str {
        "dgp-dsvi"
    }
    fn description(&self) -> &'static str {
        "deep GP with inducing points (doubly stochastic VI)"
    }
    fn spectral(&self) -> bool {
        false
    }
    fn max_layers(&self) -> Option<usize> {
        None
    }
    fn default_layers(&self) -> usize {
        2
    }
}

impl Method for VffGp {
    fn name(&self) -> &'static str {
        "gp-vff"
    }
    fn description(&self) -> &'static str {
        "shallow GP with variational Fourier features"
    }
    fn spectral(&self) -> bool {
        true
    }
    fn max_layers(&self) -> Option<usize> {
        Some(1)
    }
    fn default_layers(&self) -> usize {
        1
    }
}

impl Method for SviGp {
    fn name(&self) -> &'static str {
        "gp-svi"
    }
    fn description(&self) -> &'static str {
        "shallow sparse variational GP with inducing points"
    }
    fn spectral(&self) -> bool {
        false
    }
    fn max_layers(&self) -> Option<usize> {
        Some(1)
    }
    fn default_layers(&self) -> usize {
        1
    }
}

/// Methods keyed by name.
pub struct MethodRegistry {
    methods: IndexMap<&'static str, Box<dyn Method>>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        MethodRegistry { methods: IndexMap::new() }
    }

    pub fn register(&mut self, method: Box<dyn Method>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Method> {
        self.methods.get(name).map(|m| m.as_ref()).ok_or_else(|| {
            let known: Vec<&str> = self.names().collect();
            Error::config("method", format!("unknown method `{name}` (expected one of: {})", known.join(", ")))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.methods.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn Method> {
        self.methods.values().map(|m| m.as_ref())
    }
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = MethodRegistry::empty();
        r.register(Box::new(InterDomainDgp));
        r.register(Box::new(DsviDgp));
        r.register(Box::new(VffGp));
        r.register(Box::new(SviGp));
        r
    }
}
