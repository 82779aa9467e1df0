use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dgp::InitConfig;
use crate::error::{Error, Result};
use crate::kernels::MaternFamily;
use crate::numerics::Rng;
use crate::sparse_gp::LocalPoints;
use crate::training::TrainConfig;

use super::data::{gen_modulated_signal, gen_multistep, load_csv, Dataset, SignalSpec, StepSpec};
use super::methods::MethodRegistry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Multistep {
        #[serde(default = "default_multistep_n")]
        n: usize,
        #[serde(default)]
        seed: u64,
        #[serde(flatten)]
        spec: StepSpec,
    },
    Modulated {
        #[serde(default = "default_modulated_n")]
        n: usize,
        #[serde(default)]
        seed: u64,
        #[serde(flatten)]
        spec: SignalSpec,
    },
    Csv {
        path: PathBuf,
    },
}

fn default_multistep_n() -> usize {
    500
}

fn default_modulated_n() -> usize {
    3500
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Multistep { n: default_multistep_n(), seed: 0, spec: StepSpec::default() }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Multistep { n, seed, spec } => gen_multistep(*n, spec, &mut Rng::new(*seed)),
            DatasetSpec::Modulated { n, seed, spec } => gen_modulated_signal(*n, spec, &mut Rng::new(*seed)),
            DatasetSpec::Csv { path } => load_csv(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    pub method: String,
    /// Defaults to the method's own depth.
    pub layers: Option<usize>,
    /// Frequencies per dimension (spectral methods) or inducing points (local).
    pub frequencies: usize,
    pub kernel: MaternFamily,
    pub interval: [f64; 2],
    pub local_jitter: f64,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub init: InitConfig,
    pub test_fraction: f64,
    pub eval_samples: usize,
    pub seeds: Vec<u64>,
    /// Points on the plot-data grid for one-dimensional inputs.
    pub plot_points: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: None,
            method: "id-dgp".into(),
            layers: None,
            frequencies: 20,
            kernel: MaternFamily::ThreeHalf,
            interval: [-2.0, 3.0],
            local_jitter: LocalPoints::DEFAULT_JITTER,
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            init: InitConfig::default(),
            test_fraction: 0.4,
            eval_samples: 50,
            seeds: vec![0],
            plot_points: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| text[s].trim().to_string()).filter(|s| !s.is_empty());
            Error::Config { field: field.unwrap_or_else(|| "config".into()), msg: e.message().to_string() }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self, registry: &MethodRegistry) -> Result<()> {
        registry.get(&self.method)?.validate(self)?;
        self.train.validate()?;
        if self.frequencies == 0 {
            return Err(Error::config("frequencies", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction", "must lie in [0, 1)"));
        }
        if self.eval_samples == 0 {
            return Err(Error::config("eval_samples", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.plot_points < 2 {
            return Err(Error::config("plot_points", "need at least two grid points"));
        }
        if !(self.local_jitter >= 0.0) {
            return Err(Error::config("local_jitter", "must be non-negative"));
        }
        Ok(())
    }

    /// Short label used in file names and summaries.
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{}_m{}", self.method, self.frequencies))
    }
}
