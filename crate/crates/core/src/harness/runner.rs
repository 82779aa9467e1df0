use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dgp::{predict_density, DgpModel};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::training::{train, TrainTrace};

use super::config::ExperimentConfig;
use super::data::{split, Dataset, Normalization, Split};
use super::methods::MethodRegistry;
use super::metrics::evaluate;

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

/// Held-out metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub srmse: f64,
    pub test_log_lik: f64,
    pub train_seconds: f64,
    pub m: usize,
    pub layers: usize,
    pub final_elbo: f64,
    /// Hidden activations clamped into `[0, 1]` while evaluating.
    pub clamped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub m: usize,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutcome {
    pub records: Vec<ResultRecord>,
    pub failures: Vec<SeedFailure>,
    pub traces: Vec<(u64, TrainTrace)>,
}

impl ExperimentOutcome {
    fn extend(&mut self, other: ExperimentOutcome) {
        self.records.extend(other.records);
        self.failures.extend(other.failures);
        self.traces.extend(other.traces);
    }
}

/// Everything one seed produces.
pub struct SeedRun {
    pub record: ResultRecord,
    pub trace: TrainTrace,
    pub model: DgpModel,
    pub split: Split,
}

/// Independent streams per seed: split, model init, training, evaluation, plot.
fn stream(seed: u64, purpose: u64) -> Rng {
    Rng::new(seed).child(purpose)
}

pub fn run_seed(cfg: &ExperimentConfig, registry: &MethodRegistry, data: &Dataset, seed: u64) -> Result<SeedRun> {
    let method = registry.get(&cfg.method)?;
    let split = split(data, cfg.test_fraction, &mut stream(seed, 0))?;
    let topology = method.topology(cfg, data.dims())?;
    let layers = topology.num_layers();
    let mut model = DgpModel::new(topology, &split.train.x, stream(seed, 1).next_u64())?;
    let train_cfg = crate::training::TrainConfig { seed: stream(seed, 2).next_u64(), ..cfg.train.clone() };
    let start = Instant::now();
    let trace = train(&mut model, &split.train.x, &split.train.y, &train_cfg)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let clamped_before: u64 = model.normalizers.iter().map(|n| n.clamped).sum();
    let eval = evaluate(&mut model, &split.test, cfg.eval_samples, &mut stream(seed, 3))?;
    let clamped = model.normalizers.iter().map(|n| n.clamped).sum::<u64>() - clamped_before;
    if clamped > 0 {
        log::warn!("seed {seed}: {clamped} hidden activations clamped into [0, 1] at evaluation");
    }
    let record = ResultRecord {
        schema_version: RESULTS_SCHEMA_VERSION,
        method: cfg.method.clone(),
        dataset: data.name.clone(),
        seed,
        srmse: eval.srmse,
        test_log_lik: eval.test_log_lik,
        train_seconds,
        m: cfg.frequencies,
        layers,
        final_elbo: trace.records.last().map_or(f64::NAN, |r| r.elbo),
        clamped,
    };
    Ok(SeedRun { record, trace, model, split })
}

/// Predictive mean and standard deviation, in data units, on an even grid
/// over the normalized input range. One-dimensional inputs only.
pub fn plot_data(
    model: &mut DgpModel,
    norm: &Normalization,
    points: usize,
    samples: usize,
    rng: &mut Rng,
) -> Result<Vec<[f64; 3]>> {
    if model.topology().input_dim != 1 {
        return Err(Error::Invalid("plot data needs one-dimensional inputs".into()));
    }
    let grid = Matrix::from_fn(points, 1, |i, _| i as f64 / (points - 1) as f64);
    let pred = predict_density(model, &grid, None, samples, rng)?;
    let x = norm.inputs_back(&grid);
    Ok((0..points)
        .map(|i| [x[(i, 0)], pred.mean[i] * norm.y_std + norm.y_mean, pred.variance[i].sqrt() * norm.y_std])
        .collect())
}

fn write_plot(path: &Path, rows: &[[f64; 3]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["x", "mean", "std"]).map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Trains and evaluates one model per seed. A failing seed is recorded and
/// the remaining seeds still run. With `out`, writes `results.jsonl`,
/// `summary.csv`, per-seed traces and (for 1-D data) plot CSVs.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset, out: Option<&Path>) -> Result<ExperimentOutcome> {
    let registry = MethodRegistry::default();
    cfg.validate(&registry)?;
    let outcome = run_seeds(cfg, &registry, data, out)?;
    if let Some(dir) = out {
        write_outputs(dir, &outcome)?;
    }
    Ok(outcome)
}

fn run_seeds(cfg: &ExperimentConfig, registry: &MethodRegistry, data: &Dataset, out: Option<&Path>) -> Result<ExperimentOutcome> {
    let label = cfg.label();
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("traces"))?;
        if data.dims() == 1 {
            fs::create_dir_all(dir.join("plots"))?;
        }
    }
    let mut outcome = ExperimentOutcome::default();
    for &seed in &cfg.seeds {
        log::info!("{label}: seed {seed}");
        match run_seed(cfg, registry, data, seed) {
            Ok(mut run) => {
                if let Some(dir) = out {
                    run.trace.save(&dir.join("traces").join(format!("{label}_seed{seed}.jsonl")))?;
                    if data.dims() == 1 {
                        let rows = plot_data(&mut run.model, &run.split.normalization, cfg.plot_points, cfg.eval_samples, &mut stream(seed, 4))?;
                        write_plot(&dir.join("plots").join(format!("{label}_seed{seed}.csv")), &rows)?;
                    }
                }
                outcome.records.push(run.record);
                outcome.traces.push((seed, run.trace));
            }
            Err(e) if e.is_validation() => return Err(e),
            Err(e) => {
                log::error!("{label}: seed {seed} failed: {e}");
                outcome.failures.push(SeedFailure { seed, m: cfg.frequencies, error: e.to_string() });
            }
        }
    }
    Ok(outcome)
}

/// Runs the experiment once per value of `frequencies`.
pub fn sweep(cfg: &ExperimentConfig, data: &Dataset, frequencies: &[usize], out: Option<&Path>) -> Result<ExperimentOutcome> {
    if frequencies.is_empty() {
        return Err(Error::config("frequencies", "sweep needs at least one value"));
    }
    let registry = MethodRegistry::default();
    let mut total = ExperimentOutcome::default();
    for &m in frequencies {
        let c = ExperimentConfig { frequencies: m, ..cfg.clone() };
        c.validate(&registry)?;
        total.extend(run_seeds(&c, &registry, data, out)?);
    }
    if let Some(dir) = out {
        write_outputs(dir, &total)?;
    }
    Ok(total)
}

fn write_outputs(dir: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut results = Vec::new();
    for r in &outcome.records {
        serde_json::to_writer(&mut results, r)?;
        results.write_all(b"\n")?;
    }
    fs::write(dir.join("results.jsonl"), results)?;
    if !outcome.failures.is_empty() {
        let mut buf = Vec::new();
        for f in &outcome.failures {
            serde_json::to_writer(&mut buf, f)?;
            buf.write_all(b"\n")?;
        }
        fs::write(dir.join("failures.jsonl"), buf)?;
    }
    write_summary(&dir.join("summary.csv"), &summarize(&outcome.records))
}

/// Mean ± standard error over seeds for one (method, dataset, M, L) group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub dataset: String,
    pub m: usize,
    pub layers: usize,
    pub seeds: usize,
    pub srmse_mean: f64,
    pub srmse_se: f64,
    pub srmse_median: f64,
    pub test_log_lik_mean: f64,
    pub test_log_lik_se: f64,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    let mut groups: indexmap::IndexMap<(String, String, usize, usize), Vec<&ResultRecord>> = indexmap::IndexMap::new();
    for r in records {
        groups.entry((r.method.clone(), r.dataset.clone(), r.m, r.layers)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, dataset, m, layers), rs)| {
            let srmse: Vec<f64> = rs.iter().map(|r| r.srmse).collect();
            let tll: Vec<f64> = rs.iter().map(|r| r.test_log_lik).collect();
            let (srmse_mean, srmse_se) = mean_se(&srmse);
            let (test_log_lik_mean, test_log_lik_se) = mean_se(&tll);
            SummaryRow {
                method,
                dataset,
                m,
                layers,
                seeds: rs.len(),
                srmse_mean,
                srmse_se,
                srmse_median: median(&srmse),
                test_log_lik_mean,
                test_log_lik_se,
            }
        })
        .collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
