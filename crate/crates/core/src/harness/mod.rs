//! Datasets, generators, metrics and the experiment runner.

mod config;
mod data;
mod methods;
mod metrics;
mod runner;

pub use config::{DatasetSpec, ExperimentConfig};
pub use data::{
    gen_modulated_signal, gen_multistep, load_csv, split, Dataset, Normalization, SignalSpec, Split, StepSpec,
};
pub use methods::{Method, MethodRegistry};
pub use metrics::{evaluate, standardized_rmse, test_log_likelihood, unstandardized_log_lik, Evaluation};
pub use runner::{
    median, plot_data, read_results, run_experiment, run_seed, summarize, sweep, write_summary, ExperimentOutcome,
    ResultRecord, SeedFailure, SeedRun, SummaryRow, RESULTS_SCHEMA_VERSION,
};

use crate::autodiff::GradientReport;
use crate::dgp::{slots, DgpModel, FeatureSpec, Topology};
use crate::error::Result;
use crate::kernels::MaternFamily;
use crate::numerics::{Matrix, Rng};
use crate::training::gradcheck_elbo;

/// Central-difference step used by [`gradcheck_model`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Gradient check of the training objective of an ID-DGP on `n` random
/// points in `[0, 1]^dims`, with every slot moved away from its
/// initialization so no gradient is trivially zero.
pub fn gradcheck_model(layers: usize, frequencies: usize, n: usize, dims: usize, seed: u64) -> Result<Vec<GradientReport>> {
    let mut rng = Rng::new(seed);
    let x = Matrix::from_fn(n, dims, |_, _| rng.uniform());
    let y = Matrix::from_fn(n, 1, |i, _| (3.0 * x.row(i).iter().sum::<f64>()).sin() + 0.1 * rng.normal());
    let t = Topology::new(dims, layers, MaternFamily::ThreeHalf, FeatureSpec::Spectral { frequencies })?;
    let mut model = DgpModel::new(t, &x, seed)?;
    for l in 0..layers {
        let (_, dout) = model.topology().layer_dims(l);
        for d in 0..dout {
            let r = model.params.get_mut(&slots::q_sqrt(l, d)).expect("slot exists");
            let k = r.rows();
            *r = Matrix::from_fn(k, k, |i, j| match i.cmp(&j) {
                std::cmp::Ordering::Equal => 0.3 + 0.1 * rng.uniform(),
                std::cmp::Ordering::Greater => 0.05 * rng.normal(),
                std::cmp::Ordering::Less => 0.0,
            });
        }
        let q = model.params.get_mut(&slots::q_mu(l)).expect("slot exists");
        for v in q.data_mut() {
            *v = 0.5 * rng.normal();
        }
        for name in [slots::kernel_log_variance(l), slots::kernel_log_lengthscale(l)] {
            for v in model.params.get_mut(&name).expect("slot exists").data_mut() {
                *v += 0.1 * rng.normal();
            }
        }
    }
    gradcheck_elbo(&model, &x, &y, 2, &mut rng, GRADCHECK_STEP)
}
