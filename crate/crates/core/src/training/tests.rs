use super::*;
use crate::dgp::{FeatureSpec, Topology};
use crate::kernels::{gram, MaternFamily};
use crate::numerics::{cholesky, logdet_from_cholesky, tri_solve, TriSide};
use crate::sparse_gp::{svgp_elbo, SparseLayer};

fn toy(n: usize, seed: u64) -> (Matrix, Vec<f64>) {
    let mut rng = Rng::new(seed);
    let x = Matrix::from_fn(n, 1, |i, _| (i as f64 + 0.5) / n as f64);
    let y = (0..n).map(|i| (6.0 * x[(i, 0)]).sin() + 0.1 * rng.normal()).collect();
    (x, y)
}

fn column(y: &[f64]) -> Matrix {
    Matrix::column_vector(y.to_vec())
}

fn model(layers: usize, feature: FeatureSpec, x: &Matrix) -> DgpModel {
    let t = Topology::new(x.cols(), layers, MaternFamily::ThreeHalf, feature).unwrap();
    let mut m = DgpModel::new(t, x, 5).unwrap();
    let mut rng = Rng::new(17);
    for l in 0..layers {
        let q = m.params.get_mut(&slots::q_mu(l)).unwrap();
        let draws = rng.standard_normal(q.len());
        q.data_mut().copy_from_slice(&draws);
    }
    m
}

fn plain_elbo(m: &DgpModel, x: &Matrix, y: &Matrix, scale: f64) -> f64 {
    let kernel = m.kernel(0).unwrap();
    let z = m.params.get(&slots::inducing_inputs(0)).cloned();
    let layer = SparseLayer { feature: m.feature(0), kernel: &kernel, inducing_inputs: z.as_ref(), delta_noise: 0.0 };
    svgp_elbo(&layer, &m.variational_block(0).unwrap(), x, y, None, m.likelihood_noise(), scale).unwrap()
}

#[test]
fn single_layer_elbo_is_the_svgp_bound() {
    let (x, y) = toy(30, 1);
    let y = column(&y);
    for feature in [FeatureSpec::Spectral { frequencies: 5 }, FeatureSpec::Local { points: 6, jitter: 1e-6 }] {
        let m = model(1, feature, &x);
        let a = elbo(&m, &x, &y, 2.0, 5, &mut Rng::new(0)).unwrap();
        let b = elbo(&m, &x, &y, 2.0, 1, &mut Rng::new(9)).unwrap();
        let want = plain_elbo(&m, &x, &y, 2.0);
        assert!((a - want).abs() < 1e-10, "{a} vs {want}");
        assert_eq!(a, b);
    }
}

#[test]
fn kl_vanishes_at_the_prior() {
    let x = Matrix::from_fn(15, 2, |i, j| ((i * 3 + j * 5) % 7) as f64 / 6.0);
    for feature in [FeatureSpec::Spectral { frequencies: 3 }, FeatureSpec::Local { points: 4, jitter: 1e-6 }] {
        let mut m = model(2, feature, &x);
        for l in 0..2 {
            let kernel = m.kernel(l).unwrap();
            let z = m.params.get(&slots::inducing_inputs(l)).cloned();
            let delta = m.inter_layer_noise(l);
            let layer = SparseLayer { feature: m.feature(l), kernel: &kernel, inducing_inputs: z.as_ref(), delta_noise: delta };
            let chol = cholesky(&layer.kuu().unwrap(), JitterPolicy { max_attempts: 1, base_scale: 0.0 }).unwrap().l;
            let (_, dout) = m.topology().layer_dims(l);
            let q = m.params.get_mut(&slots::q_mu(l)).unwrap();
            *q = Matrix::zeros(q.rows(), q.cols());
            for d in 0..dout {
                m.params.insert(slots::q_sqrt(l, d), chol.clone());
            }
        }
        let kl = kl_divergence(&m, &x).unwrap();
        assert!(kl.abs() < 1e-10, "kl = {kl}");
    }
}

#[test]
fn disjoint_minibatches_average_to_full_batch() {
    let (x, y) = toy(24, 2);
    let m = model(1, FeatureSpec::Spectral { frequencies: 4 }, &x);
    let full = elbo(&m, &x, &column(&y), 1.0, 1, &mut Rng::new(0)).unwrap();
    let mut total = 0.0;
    for b in 0..4 {
        let idx: Vec<usize> = (0..6).map(|k| b + 4 * k).collect();
        let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        total += elbo(&m, &x.select_rows(&idx), &column(&yb), 4.0, 1, &mut Rng::new(0)).unwrap();
    }
    assert!((total / 4.0 - full).abs() < 1e-9);
}

#[test]
fn monte_carlo_elbo_is_stable_across_runs() {
    let (x, y) = toy(8, 3);
    let y = column(&y);
    let mut m = model(2, FeatureSpec::Spectral { frequencies: 3 }, &x);
    let s = m.params.get_mut(&slots::q_sqrt(0, 0)).unwrap();
    *s = Matrix::identity(s.rows()).scale(0.3);
    let runs = 20_000;
    let stats = |seed: u64| {
        let mut rng = Rng::new(seed);
        let v: Vec<f64> = (0..runs).map(|_| elbo(&m, &x, &y, 1.0, 1, &mut rng).unwrap()).collect();
        let mean = v.iter().sum::<f64>() / runs as f64;
        let var = v.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        (mean, (var / runs as f64).sqrt())
    };
    let (a, sa) = stats(1);
    let (b, sb) = stats(2);
    assert!(sa > 0.0);
    assert!((a - b).abs() < 3.0 * (sa * sa + sb * sb).sqrt(), "{a} vs {b}");
}

#[test]
fn zero_iterations_change_nothing() {
    let (x, y) = toy(10, 4);
    let mut m = model(2, FeatureSpec::Spectral { frequencies: 3 }, &x);
    let before = m.clone();
    let trace = train(&mut m, &x, &y, &TrainConfig { iterations: 0, ..TrainConfig::default() }).unwrap();
    assert!(trace.records.is_empty());
    assert_eq!(m.params, before.params);
    assert_eq!(m.normalizers, before.normalizers);
}

#[test]
fn training_is_deterministic_per_seed() {
    let (x, y) = toy(40, 5);
    let cfg = TrainConfig { iterations: 30, batch_size: 16, seed: 3, ..TrainConfig::default() };
    let run = || {
        let mut m = model(2, FeatureSpec::Spectral { frequencies: 4 }, &x);
        let t = train(&mut m, &x, &y, &cfg).unwrap();
        (t.elbos(), m.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let other = TrainConfig { seed: 4, ..cfg.clone() };
    let mut m = model(2, FeatureSpec::Spectral { frequencies: 4 }, &x);
    assert_ne!(train(&mut m, &x, &y, &other).unwrap().elbos(), a);
}

#[test]
fn trace_is_line_delimited_json() {
    let (x, y) = toy(10, 6);
    let mut m = model(1, FeatureSpec::Spectral { frequencies: 3 }, &x);
    let trace = train(&mut m, &x, &y, &TrainConfig { iterations: 3, ..TrainConfig::default() }).unwrap();
    let mut buf = Vec::new();
    trace.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let rec: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
    assert_eq!(rec["iter"], 2);
    for key in ["elbo", "seconds", "lr"] {
        assert!(rec[key].is_number(), "{key}");
    }
}

#[test]
fn frozen_slots_stay_put() {
    let (x, y) = toy(20, 7);
    let mut m = model(1, FeatureSpec::Spectral { frequencies: 3 }, &x);
    let before = m.params.clone();
    let cfg = TrainConfig {
        iterations: 10,
        frozen: vec!["layer0.kernel.".into(), slots::LIKELIHOOD_LOG_NOISE.into()],
        ..TrainConfig::default()
    };
    train(&mut m, &x, &y, &cfg).unwrap();
    for name in ["layer0.kernel.log_variance", "layer0.kernel.log_lengthscale", slots::LIKELIHOOD_LOG_NOISE] {
        assert_eq!(m.params.get(name), before.get(name), "{name}");
    }
    assert_ne!(m.params.get("layer0.q_mu"), before.get("layer0.q_mu"));
    let bad = TrainConfig { frozen: vec!["layer9.q_mu".into()], ..cfg };
    assert!(train(&mut m, &x, &y, &bad).is_err());
}

#[test]
fn divergence_keeps_last_good_parameters() {
    let (x, y) = toy(10, 8);
    let mut m = model(1, FeatureSpec::Spectral { frequencies: 3 }, &x);
    m.params.insert(slots::LIKELIHOOD_LOG_NOISE, Matrix::scalar(-800.0));
    let before = m.params.clone();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.json");
    let cfg = TrainConfig { iterations: 5, checkpoint_path: Some(path.clone()), ..TrainConfig::default() };
    match train(&mut m, &x, &y, &cfg) {
        Err(Error::Divergence { iter: 0, .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(m.params, before);
    assert!(path.exists());
}

#[test]
fn config_validation() {
    assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { samples: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { checkpoint_every: 5, ..TrainConfig::default() }.validate().is_err());
    let parsed: TrainConfig = toml::from_str("learning_rate = 0.001\niterations = 7").unwrap();
    assert_eq!((parsed.learning_rate, parsed.iterations, parsed.batch_size), (1e-3, 7, 256));
    assert!(toml::from_str::<TrainConfig>("learnig_rate = 0.1").is_err());
}

/// Optimal-q bound for fixed hyperparameters by direct dense algebra:
/// `log N(y | 0, Qff + σ²I) − tr(Kff − Qff) / (2σ²)`.
fn collapsed_bound(kuu: &Matrix, kuf: &Matrix, kff_diag: &[f64], y: &[f64], noise: f64) -> f64 {
    let n = y.len();
    let exact = JitterPolicy { max_attempts: 1, base_scale: 0.0 };
    let lu = cholesky(kuu, exact).unwrap().l;
    let a = tri_solve(&lu, kuf, TriSide::Lower).unwrap();
    let q = a.matmul_tn(&a).unwrap();
    let mut cov = q.clone();
    cov.add_diagonal(noise);
    let lc = cholesky(&cov, exact).unwrap().l;
    let alpha = tri_solve(&lc, &Matrix::column_vector(y.to_vec()), TriSide::Lower).unwrap();
    let quad: f64 = alpha.data().iter().map(|v| v * v).sum();
    let log_marginal = -0.5 * (quad + logdet_from_cholesky(&lc) + n as f64 * (2.0 * std::f64::consts::PI).ln());
    let trace: f64 = (0..n).map(|i| kff_diag[i] - q[(i, i)]).sum();
    log_marginal - trace / (2.0 * noise)
}

#[test]
fn training_reaches_the_collapsed_bound() {
    let (x, y) = toy(40, 9);
    let t = Topology::new(1, 1, MaternFamily::ThreeHalf, FeatureSpec::Spectral { frequencies: 10 }).unwrap();
    let mut m = DgpModel::new(t, &x, 1).unwrap();
    m.params.insert(slots::LIKELIHOOD_LOG_NOISE, Matrix::scalar(0.1f64.ln()));
    let cfg = TrainConfig {
        iterations: 2000,
        frozen: vec!["layer0.kernel.".into(), slots::LIKELIHOOD_LOG_NOISE.into()],
        ..TrainConfig::default()
    };
    let trace = train(&mut m, &x, &y, &cfg).unwrap();

    let kernel = m.kernel(0).unwrap();
    let layer = SparseLayer { feature: m.feature(0), kernel: &kernel, inducing_inputs: None, delta_noise: 0.0 };
    let kff = gram(&kernel, &x, None, false).unwrap().diagonal();
    let optimum = collapsed_bound(&layer.kuu().unwrap(), &layer.kuf(&x).unwrap(), &kff, &y, m.likelihood_noise());
    let reached = elbo(&m, &x, &column(&y), 1.0, 1, &mut Rng::new(0)).unwrap();
    assert!(reached <= optimum + 1e-6, "{reached} exceeds the optimum {optimum}");
    assert!(optimum - reached < 0.1, "{reached} vs optimum {optimum}");
    let e = trace.elbos();
    assert!(e[e.len() - 1] > e[0]);
}
