use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use iddgp::autodiff::GRADCHECK_TOLERANCE;
use iddgp::dgp::{load_checkpoint, save_checkpoint};
use iddgp::harness::{
    evaluate, gen_modulated_signal, gen_multistep, gradcheck_model, load_csv, run_experiment, run_seed, summarize,
    sweep, DatasetSpec, ExperimentConfig, MethodRegistry, Normalization, SignalSpec, StepSpec, SummaryRow,
};
use iddgp::numerics::Rng;
use iddgp::{Error, Result};

#[derive(Parser)]
#[command(name = "iddgp", version, about = "Train and evaluate inter-domain deep Gaussian processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on the configured dataset and save a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a CSV file (target in the last column).
    Eval(EvalArgs),
    /// Train and evaluate every configured seed and write results.
    Experiment(RunArgs),
    /// Write a synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients of the training objective.
    Gradcheck(GradcheckArgs),
    /// Repeat an experiment over several frequency / inducing-point counts.
    Sweep(SweepArgs),
}

/// Flags that override fields of the TOML config.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// id-dgp, dgp-dsvi, gp-vff or gp-svi.
    #[arg(long)]
    method: Option<String>,
    /// Number of layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Frequencies per input dimension, or inducing points for local methods.
    #[arg(long)]
    frequencies: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Training iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Minibatch size.
    #[arg(long)]
    batch: Option<usize>,
    /// CSV data file; replaces the configured dataset.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = &self.method {
            cfg.method = m.clone();
        }
        if self.layers.is_some() {
            cfg.layers = self.layers;
        }
        if let Some(f) = self.frequencies {
            cfg.frequencies = f;
        }
        if let Some(lr) = self.lr {
            cfg.train.learning_rate = lr;
        }
        if let Some(i) = self.iters {
            cfg.train.iterations = i;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(b) = self.batch {
            cfg.train.batch_size = b;
        }
        if let Some(path) = &self.data {
            cfg.dataset = DatasetSpec::Csv { path: path.clone() };
        }
        cfg.validate(&MethodRegistry::default())?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory for model.json and trace.jsonl.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV data to score.
    #[arg(long)]
    data: PathBuf,
    /// Monte Carlo samples for the predictive density.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory for results, summary, traces and plot data.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Multistep,
    Modulated,
}

#[derive(Args)]
struct SynthArgs {
    generator: Generator,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Observation noise standard deviation (generator default when omitted).
    #[arg(long)]
    noise: Option<f64>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 3)]
    frequencies: usize,
    /// Random data points.
    #[arg(long, default_value_t = 8)]
    points: usize,
    /// Input dimensions.
    #[arg(long, default_value_t = 2)]
    dims: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated frequency / inducing-point counts.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn print_summary(rows: &[SummaryRow]) {
    println!("{:<10} {:>5} {:>3} {:>5} {:>18} {:>20}", "method", "M", "L", "seeds", "sRMSE", "test log-lik");
    for r in rows {
        println!(
            "{:<10} {:>5} {:>3} {:>5} {:>9.4} ± {:<6.4} {:>10.4} ± {:<7.4}",
            r.method, r.m, r.layers, r.seeds, r.srmse_mean, r.srmse_se, r.test_log_lik_mean, r.test_log_lik_se
        );
    }
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let data = cfg.dataset.load()?;
    let seed = cfg.seeds[0];
    let run = run_seed(&cfg, &MethodRegistry::default(), &data, seed)?;
    fs::create_dir_all(&args.out)?;
    let meta = serde_json::to_value(&run.split.normalization)?;
    save_checkpoint(&run.model, &args.out.join("model.json"), Some(meta))?;
    run.trace.save(&args.out.join("trace.jsonl"))?;
    println!("{}", serde_json::to_string(&run.record)?);
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let (mut model, meta) = load_checkpoint(&args.checkpoint)?;
    let norm: Normalization = match meta {
        Some(v) => serde_json::from_value(v)?,
        None => return Err(Error::Data("checkpoint carries no data normalization".into())),
    };
    let mut data = load_csv(&args.data)?;
    if data.dims() != norm.x_min.len() {
        return Err(Error::Data(format!("data has {} features, model expects {}", data.dims(), norm.x_min.len())));
    }
    data.x = norm.inputs(&data.x);
    data.y = norm.targets(&data.y);
    data.normalization = Some(norm);
    let e = evaluate(&mut model, &data, args.samples, &mut Rng::new(args.seed))?;
    println!("{}", serde_json::json!({ "srmse": e.srmse, "test_log_lik": e.test_log_lik, "points": data.len() }));
    Ok(())
}

fn experiment_cmd(args: &RunArgs) -> Result<bool> {
    let cfg = args.overrides.resolve()?;
    let data = cfg.dataset.load()?;
    let out = run_experiment(&cfg, &data, Some(&args.out))?;
    print_summary(&summarize(&out.records));
    report_failures(&out.failures);
    Ok(out.failures.is_empty())
}

fn sweep_cmd(args: &SweepArgs) -> Result<bool> {
    let cfg = args.overrides.resolve()?;
    let data = cfg.dataset.load()?;
    let out = sweep(&cfg, &data, &args.values, Some(&args.out))?;
    print_summary(&summarize(&out.records));
    report_failures(&out.failures);
    Ok(out.failures.is_empty())
}

fn report_failures(failures: &[iddgp::harness::SeedFailure]) {
    for f in failures {
        eprintln!("seed {} (M={}) failed: {}", f.seed, f.m, f.error);
    }
}

fn synth_cmd(args: &SynthArgs) -> Result<()> {
    let mut rng = Rng::new(args.seed);
    let data = match args.generator {
        Generator::Multistep => {
            let mut spec = StepSpec::default();
            if let Some(s) = args.noise {
                spec.noise = s;
            }
            gen_multistep(args.n, &spec, &mut rng)?
        }
        Generator::Modulated => {
            let mut spec = SignalSpec::default();
            if let Some(s) = args.noise {
                spec.noise = s;
            }
            gen_modulated_signal(args.n, &spec, &mut rng)?
        }
    };
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    data.write_csv(&args.out)?;
    eprintln!("wrote {} rows to {}", data.len(), args.out.display());
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs) -> Result<bool> {
    if args.layers == 0 || args.frequencies == 0 || args.points == 0 || args.dims == 0 {
        return Err(Error::config("gradcheck", "layers, frequencies, points and dims must be positive"));
    }
    let reports = gradcheck_model(args.layers, args.frequencies, args.points, args.dims, args.seed)?;
    println!("{:<34} {:>6} {:>14} {:>14} {:>10}  status", "slot", "index", "analytic", "finite diff", "rel err");
    for r in &reports {
        println!(
            "{:<34} {:>6} {:>14.6e} {:>14.6e} {:>10.2e}  {}",
            r.slot,
            r.index,
            r.analytic,
            r.finite_difference,
            r.relative_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} slots, {failed} above tolerance {GRADCHECK_TOLERANCE:e}", reports.len());
    Ok(failed == 0)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Experiment(a) => experiment_cmd(a),
        Command::Synth(a) => synth_cmd(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
