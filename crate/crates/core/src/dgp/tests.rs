use super::*;
use crate::numerics::{log_normal_pdf, symmetric_eigen};
use crate::sparse_gp::{layer_predict, SparseLayer};

fn inputs(n: usize) -> Matrix {
    Matrix::from_fn(n, 1, |i, _| (i as f64 + 0.5) / n as f64)
}

fn spectral(layers: usize) -> Topology {
    Topology::new(1, layers, MaternFamily::Half, FeatureSpec::Spectral { frequencies: 4 }).unwrap()
}

/// A model whose variational means are far from zero, so every layer
/// actually transforms its input.
fn perturbed(t: Topology, x: &Matrix, seed: u64) -> DgpModel {
    let mut model = DgpModel::new(t, x, seed).unwrap();
    let mut rng = Rng::new(seed + 100);
    for l in 0..model.num_layers() {
        let q = model.params.get_mut(&slots::q_mu(l)).unwrap();
        let draws = rng.standard_normal(q.data().len());
        for (v, e) in q.data_mut().iter_mut().zip(draws) {
            *v = 0.6 * e;
        }
        if l + 1 < model.num_layers() {
            // Visible inter-layer uncertainty.
            let s = model.params.get_mut(&slots::q_sqrt(l, 0)).unwrap();
            *s = Matrix::identity(s.rows()).scale(0.3);
        }
    }
    model
}

fn layer_on_plain(model: &DgpModel, l: usize, h: &Matrix) -> LayerPrediction {
    let kernel = model.kernel(l).unwrap();
    let z = model.params.get(&slots::inducing_inputs(l)).cloned();
    let layer = SparseLayer {
        feature: model.feature(l),
        kernel: &kernel,
        inducing_inputs: z.as_ref(),
        delta_noise: model.inter_layer_noise(l),
    };
    let mf = model.mean_weights(l).map(|w| h.matmul(&w).unwrap());
    layer_predict(&layer, &model.variational_block(l).unwrap(), h, mf.as_ref()).unwrap()
}

use crate::sparse_gp::LayerPrediction;

#[test]
fn topology_validation() {
    assert!(Topology::new(2, 0, MaternFamily::Half, FeatureSpec::Spectral { frequencies: 3 }).is_err());
    assert!(Topology::new(2, 2, MaternFamily::FiveHalf, FeatureSpec::Spectral { frequencies: 3 }).is_err());
    assert!(Topology::new(2, 2, MaternFamily::FiveHalf, FeatureSpec::Local { points: 3, jitter: 1e-6 }).is_ok());
    let mut t = spectral(2);
    t.widths = vec![1, 2];
    assert!(t.validate().is_err());
}

#[test]
fn slots_follow_topology() {
    let x = Matrix::from_fn(30, 2, |i, j| ((i * 3 + j * 7) % 10) as f64 / 9.0);
    let t = Topology::new(2, 3, MaternFamily::ThreeHalf, FeatureSpec::Local { points: 5, jitter: 1e-6 }).unwrap();
    let model = DgpModel::new(t, &x, 1).unwrap();
    assert_eq!(model.params.get("layer1.inducing_inputs").unwrap().shape(), (5, 2));
    assert_eq!(model.params.get("layer2.q_mu").unwrap().shape(), (5, 1));
    assert!(model.params.get("layer2.log_noise").is_none());
    assert!(model.params.get("layer0.q_sqrt.1").is_some());
    let z = model.params.get("layer0.inducing_inputs").unwrap();
    assert!(z.data().iter().all(|v| (0.0..=1.0).contains(v)));
    // Hidden normalizers were warmed up at construction.
    assert!(model.normalizers[1].initialized && !model.normalizers[1].fixed);

    let mut params = model.params.clone();
    params.insert("layer0.q_mu", Matrix::zeros(4, 2));
    assert!(DgpModel::from_parts(model.topology().clone(), params, model.normalizers.clone(), 1).is_err());
}

#[test]
fn zero_noise_composes_layer_means() {
    let x = inputs(25);
    let mut model = perturbed(spectral(3), &x, 3);
    let mut norms = model.normalizers.clone();
    let out = sample_forward_with_noise(&mut model, &x, 1, None, Mode::Eval).unwrap();

    let mut h = norms[0].apply(&x, Mode::Eval);
    for l in 0..3 {
        let p = layer_on_plain(&model, l, &h);
        assert!(p.mean.sub(&out[l].mean).unwrap().max_abs() < 1e-12, "layer {l}");
        assert!(p.variance.sub(&out[l].variance).unwrap().max_abs() < 1e-12, "layer {l}");
        assert_eq!(out[l].sample, out[l].mean);
        if l < 2 {
            h = norms[l + 1].apply(&p.mean, Mode::Eval);
        }
    }
    // Zero draws reproduce the deterministic pass.
    let zeros: Vec<Matrix> = model.topology().widths.iter().map(|&w| Matrix::zeros(25, w)).collect();
    let again = sample_forward_with_noise(&mut model, &x, 1, Some(&zeros), Mode::Eval).unwrap();
    assert_eq!(again[2].sample, out[2].mean);
}

#[test]
fn single_layer_copies_are_identical() {
    let x = inputs(10);
    let mut model = perturbed(spectral(1), &x, 4);
    let out = sample_forward(&mut model, &x, 3, &mut Rng::new(1), Mode::Eval).unwrap();
    assert_eq!(out[0].mean.rows(), 10);
    assert_eq!(out[0].sample.rows(), 30);
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let mut norms = model.normalizers.clone();
    let noise = model.noise_draws(10, 3, &mut Rng::new(2));
    let fwd = model.forward_on_tape(&mut tape, &b, &x, 3, Some(&noise), &mut norms, Mode::Eval).unwrap();
    assert_eq!(fwd.samples, 1);
}

#[test]
fn deep_layers_tile_first_layer() {
    let x = inputs(8);
    let mut model = perturbed(spectral(2), &x, 5);
    let out = sample_forward(&mut model, &x, 4, &mut Rng::new(1), Mode::Eval).unwrap();
    assert_eq!(out[0].mean.rows(), 32);
    for s in 1..4 {
        for i in 0..8 {
            assert_eq!(out[0].mean[(s * 8 + i, 0)], out[0].mean[(i, 0)]);
        }
    }
    // Different copies see different first-layer draws.
    assert_ne!(out[0].sample[(0, 0)], out[0].sample[(8, 0)]);
}

/// Probabilists' Gauss–Hermite rule via the Golub–Welsch eigenproblem.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = Matrix::from_fn(n, n, |a, b| if a + 1 == b || b + 1 == a { (a.max(b) as f64).sqrt() } else { 0.0 });
    let (nodes, vecs) = symmetric_eigen(&j).unwrap();
    let weights = (0..n).map(|k| vecs[(0, k)] * vecs[(0, k)]).collect();
    (nodes, weights)
}

#[test]
fn two_layer_moments_match_quadrature() {
    let x = inputs(6);
    let mut model = perturbed(spectral(2), &x, 6);
    let mut norms = model.normalizers.clone();
    let h0 = norms[0].apply(&x, Mode::Eval);
    let first = layer_on_plain(&model, 0, &h0);
    let (nodes, weights) = gauss_hermite(80);
    let sigma2 = model.likelihood_noise();

    let s = 20_000;
    let pred = predict_density(&mut model, &x, None, s, &mut Rng::new(11)).unwrap();
    for i in 0..6 {
        let (m1, v1) = (first.mean[(i, 0)], first.variance[(i, 0)].max(VARIANCE_FLOOR));
        let f1 = Matrix::column_vector(nodes.iter().map(|z| m1 + z * v1.sqrt()).collect());
        let h1 = norms[1].apply(&f1, Mode::Eval);
        let second = layer_on_plain(&model, 1, &h1);
        let mean: f64 = (0..nodes.len()).map(|k| weights[k] * second.mean[(k, 0)]).sum();
        let second_moment: f64 =
            (0..nodes.len()).map(|k| weights[k] * (second.variance[(k, 0)] + second.mean[(k, 0)].powi(2))).sum();
        let var = second_moment - mean * mean + sigma2;
        let se = (var / s as f64).sqrt();
        assert!((pred.mean[i] - mean).abs() < 5.0 * se, "point {i}: {} vs {mean}", pred.mean[i]);
        assert!((pred.variance[i] - var).abs() < 0.05 * var, "point {i}: {} vs {var}", pred.variance[i]);
    }
}

#[test]
fn density_converges_in_samples() {
    let x = inputs(5);
    let mut model = perturbed(spectral(2), &x, 7);
    let y = [0.3, -0.2, 0.5, 0.0, 1.0];
    let coarse = predict_density(&mut model, &x, Some(&y), 100, &mut Rng::new(1)).unwrap();
    let fine = predict_density(&mut model, &x, Some(&y), 10_000, &mut Rng::new(2)).unwrap();
    for (a, b) in coarse.log_density.unwrap().iter().zip(fine.log_density.unwrap()) {
        assert!((a - b).abs() < 0.2, "{a} vs {b}");
    }
}

#[test]
fn single_layer_density_is_exact() {
    let x = inputs(7);
    let mut model = perturbed(spectral(1), &x, 8);
    let y: Vec<f64> = (0..7).map(|i| (i as f64 * 0.4).sin()).collect();
    let pred = predict_density(&mut model, &x, Some(&y), 1, &mut Rng::new(0)).unwrap();
    let plain = layer_on_plain(&model, 0, &x);
    let noise = model.likelihood_noise();
    for i in 0..7 {
        let v = plain.variance[(i, 0)] + noise;
        let want = log_normal_pdf(y[i], plain.mean[(i, 0)], v);
        assert!((pred.log_density.as_ref().unwrap()[i] - want).abs() < 1e-12);
        assert!((pred.variance[i] - v).abs() < 1e-12);
    }
}

#[test]
fn chunked_prediction_matches_per_point_moments() {
    // More points than one chunk; a single layer makes moments deterministic.
    let x = inputs(1100);
    let mut model = perturbed(spectral(1), &x, 9);
    let pred = predict_density(&mut model, &x, None, 2, &mut Rng::new(0)).unwrap();
    let plain = layer_on_plain(&model, 0, &x);
    for i in [0, 511, 512, 1099] {
        assert!((pred.mean[i] - plain.mean[(i, 0)]).abs() < 1e-12);
    }
}

#[test]
fn eval_mode_leaves_statistics_alone() {
    let x = inputs(12);
    let mut model = perturbed(spectral(2), &x, 10);
    let before = model.normalizers[1].clone();
    let wide = Matrix::from_fn(12, 1, |i, _| i as f64 / 11.0 * 1.4 - 0.2);
    sample_forward(&mut model, &wide, 2, &mut Rng::new(0), Mode::Eval).unwrap();
    assert_eq!(model.normalizers[1].min, before.min);
    assert_eq!(model.normalizers[1].max, before.max);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let x = Matrix::from_fn(20, 2, |i, j| ((i * 5 + j) % 7) as f64 / 6.0);
    let t = Topology::new(2, 2, MaternFamily::ThreeHalf, FeatureSpec::Local { points: 4, jitter: 1e-6 }).unwrap();
    let mut model = DgpModel::new(t, &x, 12).unwrap();
    model.params.get_mut("layer1.q_mu").unwrap().data_mut()[0] = 0.1 + 0.2;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&model, &path, Some(serde_json::json!({"y_mean": 0.25}))).unwrap();
    let (mut back, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(meta.unwrap()["y_mean"], 0.25);
    assert_eq!(back.params, model.params);
    assert_eq!(back.normalizers, model.normalizers);
    assert_eq!(back.topology(), model.topology());
    let a = predict_density(&mut model, &x, None, 5, &mut Rng::new(3)).unwrap();
    let b = predict_density(&mut back, &x, None, 5, &mut Rng::new(3)).unwrap();
    assert_eq!(a, b);
    assert!(std::fs::read_dir(dir.path()).unwrap().count() == 1, "temp file left behind");
}

#[test]
fn checkpoint_rejects_unknown_schema() {
    let x = inputs(5);
    let model = DgpModel::new(spectral(1), &x, 0).unwrap();
    let mut ck = Checkpoint::from_model(&model, None);
    ck.schema_version = 99;
    assert!(ck.into_model().is_err());
}
