//! Numerical evaluation of the Fourier-feature Gram via the Matérn RKHS
//! inner product in differential-operator form:
//!
//! `⟨g, h⟩ = (1/q) ∫_a^b (Lg)(Lh) dx + s_g(a)ᵀ P⁻¹ s_h(a)`
//!
//! with `L = (λ + d/dx)^p`, `q` the driving-noise density, `s` the state
//! `(f, f′, ..)` and `P` the stationary state covariance.

use crate::error::{Error, Result};
use crate::kernels::MaternFamily;
use crate::numerics::Matrix;

use super::FourierFeatureSet;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const MAX_FEATURES: usize = 33;
const MAX_DEPTH: u32 = 40;
const TOLERANCE: f64 = 1e-11;

// Gauss–Kronrod 7/15 abscissae on [-1, 1] (non-negative half) and weights.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

/// Adaptive Gauss–Kronrod integral of a vector-valued function.
///
/// `panels` sets the initial uniform subdivision; each panel is bisected
/// until the Kronrod/Gauss difference is within its share of `tol`.
pub(crate) fn integrate<F>(f: F, a: f64, b: f64, dim: usize, panels: usize, tol: f64) -> Result<Vec<f64>>
where
    F: Fn(f64, &mut [f64]),
{
    let mut total = vec![0.0; dim];
    let width = (b - a) / panels.max(1) as f64;
    let mut stack: Vec<(f64, f64, u32)> =
        (0..panels.max(1)).map(|i| (a + i as f64 * width, a + (i + 1) as f64 * width, 0)).collect();
    let mut buf = vec![0.0; dim];
    let mut kron = vec![0.0; dim];
    let mut gauss = vec![0.0; dim];
    let mut magnitude = vec![0.0; dim];
    while let Some((lo, hi, depth)) = stack.pop() {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        kron.iter_mut().for_each(|v| *v = 0.0);
        gauss.iter_mut().for_each(|v| *v = 0.0);
        magnitude.iter_mut().for_each(|v| *v = 0.0);
        for (k, (&x, &wk)) in XGK.iter().zip(&WGK).enumerate() {
            let nodes: &[f64] = if x == 0.0 { &[mid] } else { &[mid - half * x, mid + half * x] };
            for &node in nodes {
                f(node, &mut buf);
                for (i, v) in buf.iter().enumerate() {
                    kron[i] += wk * v;
                    magnitude[i] += wk * v.abs();
                    if k % 2 == 1 {
                        gauss[i] += WG[k / 2] * v;
                    }
                }
            }
        }
        let err = kron.iter().zip(&gauss).map(|(k, g)| (k - g).abs()).fold(0.0, f64::max) * half;
        let share = tol * (hi - lo) / (b - a);
        // Below this the Kronrod/Gauss gap is rounding noise.
        let floor = 50.0 * f64::EPSILON * magnitude.iter().fold(0.0, |m: f64, v| m.max(*v)) * half;
        if err <= share.max(floor) {
            for (t, k) in total.iter_mut().zip(&kron) {
                *t += k * half;
            }
        } else if depth >= MAX_DEPTH {
            return Err(Error::Quadrature(err));
        } else {
            stack.push((lo, mid, depth + 1));
            stack.push((mid, hi, depth + 1));
        }
    }
    Ok(total)
}

/// Gram of the Fourier basis by quadrature, starting from `panels` panels.
pub fn kuu_quadrature(fs: &FourierFeatureSet, panels: usize) -> Result<Matrix> {
    let n = fs.num_features();
    if n > MAX_FEATURES {
        return Err(Error::Invalid(format!("quadrature oracle supports at most 16 frequencies, got {}", fs.m_count)));
    }
    let var = fs.kernel.variance;
    let (a, b) = (fs.interval.a(), fs.interval.b());
    let omegas = fs.frequencies();
    let m = fs.m_count;
    // Coefficients of L = Σ_k c_k d^k, the noise density q, and the
    // stationary variances of the state derivatives.
    let (coeffs, q, state_var): (Vec<f64>, f64, Vec<f64>) = match fs.kernel.family {
        MaternFamily::Half => {
            let lam = 1.0 / fs.kernel.lengthscale;
            (vec![lam, 1.0], 2.0 * lam * var, vec![var])
        }
        MaternFamily::ThreeHalf => {
            let lam = SQRT3 / fs.kernel.lengthscale;
            (vec![lam * lam, 2.0 * lam, 1.0], 4.0 * lam.powi(3) * var, vec![var, lam * lam * var])
        }
        other => return Err(Error::UnsupportedFamily(format!("no quadrature form for {other}"))),
    };
    // Derivatives of order k of each basis function at offset t.
    let derivs = |t: f64, order: usize, out: &mut [f64]| {
        out[0] = if order == 0 { 1.0 } else { 0.0 };
        for (i, w) in omegas.iter().enumerate() {
            let (s, c) = (w * t).sin_cos();
            let wk = w.powi(order as i32);
            // d^k cos = ω^k cos(θ + kπ/2), d^k sin = ω^k sin(θ + kπ/2).
            let (dc, ds) = match order % 4 {
                0 => (c, s),
                1 => (-s, c),
                2 => (-c, -s),
                _ => (s, -c),
            };
            out[1 + i] = wk * dc;
            out[1 + m + i] = wk * ds;
        }
    };
    let integrand = |x: f64, out: &mut [f64]| {
        let t = x - a;
        let mut lphi = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for (order, c) in coeffs.iter().enumerate() {
            derivs(t, order, &mut tmp);
            for (l, v) in lphi.iter_mut().zip(&tmp) {
                *l += c * v;
            }
        }
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = lphi[i] * lphi[j] / q;
            }
        }
    };
    let flat = integrate(integrand, a, b, n * n, panels, TOLERANCE)?;
    let mut out = Matrix::from_vec(n, n, flat)?;
    let mut s = vec![0.0; n];
    for (order, pv) in state_var.iter().enumerate() {
        derivs(0.0, order, &mut s);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] += s[i] * s[j] / pv;
            }
        }
    }
    Ok(out)
}

/// [`kuu_quadrature`] at the default resolution.
pub fn kuu_quadrature_oracle(fs: &FourierFeatureSet) -> Result<Matrix> {
    kuu_quadrature(fs, 32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::MaternKernel;
    use crate::vff::Interval;

    fn fs(family: MaternFamily, m: usize) -> FourierFeatureSet {
        FourierFeatureSet::new(Interval::new(-2.0, 3.0).unwrap(), m, MaternKernel::new(family, 1.0, 0.5).unwrap())
    }

    #[test]
    fn integrates_polynomials_and_oscillations() {
        let v = integrate(|x, o| o[0] = x.powi(5) - 2.0 * x, 0.0, 2.0, 1, 1, 1e-12).unwrap();
        assert!((v[0] - (64.0 / 6.0 - 4.0)).abs() < 1e-12);
        let v = integrate(|x, o| o[0] = (40.0 * x).cos(), 0.0, 5.0, 1, 2, 1e-12).unwrap();
        assert!((v[0] - (200.0f64).sin() / 40.0).abs() < 1e-11);
    }

    #[test]
    fn oracle_is_symmetric() {
        let k = kuu_quadrature_oracle(&fs(MaternFamily::ThreeHalf, 4)).unwrap();
        assert!(k.asymmetry() < 1e-14);
    }

    #[test]
    fn matern12_constant_feature() {
        // ⟨1, 1⟩ = λ²(b − a)/(2λσ²) + 1/σ² with λ = 1/ℓ.
        let k = kuu_quadrature_oracle(&fs(MaternFamily::Half, 0)).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert!((k[(0, 0)] - (2.0 * 5.0 / 2.0 + 1.0)).abs() < 1e-10);
    }

    #[test]
    fn doubling_resolution_is_stable() {
        for family in [MaternFamily::Half, MaternFamily::ThreeHalf] {
            let f = fs(family, 16);
            let coarse = kuu_quadrature(&f, 32).unwrap();
            let fine = kuu_quadrature(&f, 64).unwrap();
            for (c, d) in coarse.data().iter().zip(fine.data()) {
                assert!((c - d).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn refuses_large_bases() {
        assert!(kuu_quadrature_oracle(&fs(MaternFamily::Half, 17)).is_err());
    }
}
