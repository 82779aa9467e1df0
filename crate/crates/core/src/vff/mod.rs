//! Variational Fourier features: inducing variables defined as RKHS inner
//! products of a Matérn GP with a truncated Fourier basis on an interval.
//!
//! Feature order within one dimension is `[1, cos_1..cos_M, sin_1..sin_M]`
//! with `ω_m = 2πm / (b − a)`.

mod quadrature;
mod tape_ops;

pub use quadrature::{kuu_quadrature, kuu_quadrature_oracle};
pub use tape_ops::{vff_kuf_on_tape, vff_kuu_on_tape, AdditiveVffKuu, FourierFeatureMap};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{AdditiveKernel, MaternFamily, MaternKernel};
use crate::numerics::{cholesky, tri_solve, JitterPolicy, Matrix, TriSide};

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    a: f64,
    b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::Invalid(format!("interval needs a < b, got [{a}, {b}]")));
        }
        Ok(Interval { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn length(&self) -> f64 {
        self.b - self.a
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.a && x <= self.b
    }

    /// `ω_1..ω_M`.
    pub fn frequencies(&self, m_count: usize) -> Vec<f64> {
        (1..=m_count).map(|m| 2.0 * PI * m as f64 / self.length()).collect()
    }

    fn check(&self, x: f64) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::OutsideInterval { value: x, a: self.a, b: self.b })
        }
    }
}

/// Fourier features for one scalar Matérn GP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierFeatureSet {
    pub interval: Interval,
    pub m_count: usize,
    pub kernel: MaternKernel,
}

impl FourierFeatureSet {
    pub fn new(interval: Interval, m_count: usize, kernel: MaternKernel) -> Self {
        FourierFeatureSet { interval, m_count, kernel }
    }

    pub fn num_features(&self) -> usize {
        2 * self.m_count + 1
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.interval.frequencies(self.m_count)
    }
}

/// `[1, cos(ω_m (x − a)).., sin(ω_m (x − a))..]`, which is also the
/// covariance between each inducing variable and `f(x)`.
pub fn phi_eval(fs: &FourierFeatureSet, x: f64) -> Result<Vec<f64>> {
    fs.interval.check(x)?;
    let mut out = vec![0.0; fs.num_features()];
    out[0] = 1.0;
    write_trig(&fs.frequencies(), x - fs.interval.a, &mut out[1..]);
    Ok(out)
}

/// Writes `[cos_1..cos_M, sin_1..sin_M]` at offset `t = x − a`.
fn write_trig(omegas: &[f64], t: f64, out: &mut [f64]) {
    let m = omegas.len();
    for (k, w) in omegas.iter().enumerate() {
        let (s, c) = (w * t).sin_cos();
        out[k] = c;
        out[m + k] = s;
    }
}

/// Closed-form RKHS Gram of the basis together with its derivative with
/// respect to the log-lengthscale. The derivative with respect to the
/// log-variance is `−K`, since every entry scales with `1/σ²`.
pub(crate) fn kuu_with_derivative(kernel: &MaternKernel, interval: Interval, m_count: usize) -> Result<(Matrix, Matrix)> {
    let n = 2 * m_count + 1;
    let w = interval.length();
    let var = kernel.variance;
    let omegas = interval.frequencies(m_count);
    let mut k = Matrix::zeros(n, n);
    let mut dk = Matrix::zeros(n, n);
    let sin = |i: usize| 1 + m_count + i;
    match kernel.family {
        MaternFamily::Half => {
            let lam = 1.0 / kernel.lengthscale;
            // Constant and cosine features share the boundary term 1/σ².
            for i in 0..=m_count {
                for j in 0..=m_count {
                    k[(i, j)] = 1.0 / var;
                }
            }
            k[(0, 0)] += lam * w / (2.0 * var);
            dk[(0, 0)] = w / (2.0 * var);
            for (i, om) in omegas.iter().enumerate() {
                let d = (lam * lam + om * om) * w / (4.0 * lam * var);
                let dd = w / (4.0 * var) * (1.0 - om * om / (lam * lam));
                k[(1 + i, 1 + i)] += d;
                k[(sin(i), sin(i))] = d;
                dk[(1 + i, 1 + i)] = dd;
                dk[(sin(i), sin(i))] = dd;
            }
            // dλ / dlogℓ = −λ.
            dk = dk.scale(-lam);
        }
        MaternFamily::ThreeHalf => {
            let lam = SQRT3 / kernel.lengthscale;
            for i in 0..=m_count {
                for j in 0..=m_count {
                    k[(i, j)] = 1.0 / var;
                }
            }
            k[(0, 0)] += lam * w / (4.0 * var);
            dk[(0, 0)] = w / (4.0 * var);
            let lam2 = lam * lam;
            for (i, oi) in omegas.iter().enumerate() {
                let s = lam2 + oi * oi;
                let d = s * s * w / (8.0 * lam2 * lam * var);
                let dd = w * s * (lam2 - 3.0 * oi * oi) / (8.0 * var * lam2 * lam2);
                k[(1 + i, 1 + i)] += d;
                dk[(1 + i, 1 + i)] = dd;
                for (j, oj) in omegas.iter().enumerate() {
                    k[(sin(i), sin(j))] = oi * oj / (lam2 * var);
                    dk[(sin(i), sin(j))] = -2.0 * oi * oj / (lam2 * lam * var);
                }
                k[(sin(i), sin(i))] += d;
                dk[(sin(i), sin(i))] += dd;
            }
            dk = dk.scale(-lam);
        }
        MaternFamily::FiveHalf => {
            return Err(Error::UnsupportedFamily(format!(
                "Fourier-feature covariance has no implementation for {}",
                kernel.family
            )))
        }
    }
    Ok((k, dk))
}

/// Covariance of the inducing variables, `⟨φ_i, φ_j⟩` in the kernel's RKHS.
pub fn kuu(fs: &FourierFeatureSet) -> Result<Matrix> {
    Ok(kuu_with_derivative(&fs.kernel, fs.interval, fs.m_count)?.0)
}

/// Projected kernel `φ(x)ᵀ Kuu⁻¹ φ(x′)`.
pub fn k_projected(fs: &FourierFeatureSet, x: f64, y: f64) -> Result<f64> {
    Ok(projected_gram(fs, &[x], &[y])?[(0, 0)])
}

/// Projected kernel between every pair of `xs` and `ys`.
pub fn projected_gram(fs: &FourierFeatureSet, xs: &[f64], ys: &[f64]) -> Result<Matrix> {
    let l = cholesky(&kuu(fs)?, JitterPolicy::default())?.l;
    let features = |pts: &[f64]| -> Result<Matrix> {
        let mut out = Matrix::zeros(fs.num_features(), pts.len());
        for (j, &p) in pts.iter().enumerate() {
            for (i, v) in phi_eval(fs, p)?.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        tri_solve(&l, &out, TriSide::Lower)
    };
    let a = features(xs)?;
    let b = features(ys)?;
    a.matmul_tn(&b)
}

/// Fourier features for an additive kernel: one shared constant feature and
/// a cosine/sine block per input dimension.
///
/// The constant inducing variable is the sum over dimensions of the
/// per-dimension constant projections, so it covaries with `f(x)` by `D`
/// and with each dimension's block through that dimension's Gram row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdditiveFeatureSet {
    pub interval: Interval,
    pub m_count: usize,
    pub kernel: AdditiveKernel,
}

impl AdditiveFeatureSet {
    pub fn new(interval: Interval, m_count: usize, kernel: AdditiveKernel) -> Self {
        AdditiveFeatureSet { interval, m_count, kernel }
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.components.len()
    }

    pub fn num_features(&self) -> usize {
        2 * self.m_count * self.input_dim() + 1
    }

    /// First global index of dimension `d`'s cosine/sine block.
    pub fn block_offset(&self, d: usize) -> usize {
        block_offset(self.m_count, d)
    }

    pub fn kuu(&self) -> Result<Matrix> {
        let dims = self.input_dim();
        let blocks = self
            .kernel
            .components
            .iter()
            .map(|c| Ok(kuu_with_derivative(c, self.interval, self.m_count)?.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(assemble_additive(&blocks, self.m_count, dims))
    }
}

pub(crate) fn block_offset(m_count: usize, d: usize) -> usize {
    1 + 2 * m_count * d
}

/// Places per-dimension `(2M+1)²` blocks into the shared-constant layout.
pub(crate) fn assemble_additive(blocks: &[Matrix], m_count: usize, dims: usize) -> Matrix {
    let n = 2 * m_count * dims + 1;
    let mut out = Matrix::zeros(n, n);
    for (d, kd) in blocks.iter().enumerate() {
        let map = |i: usize| if i == 0 { 0 } else { block_offset(m_count, d) + i - 1 };
        for i in 0..kd.rows() {
            for j in 0..kd.cols() {
                out[(map(i), map(j))] += kd[(i, j)];
            }
        }
    }
    out
}

/// Feature matrix (`N x (2MD+1)`) of the rows of `x`, and the matching Kuu.
pub fn additive_features(afs: &AdditiveFeatureSet, x: &Matrix) -> Result<(Matrix, Matrix)> {
    let dims = afs.input_dim();
    if x.cols() != dims {
        return Err(Error::shape("additive_features", format!("expected {dims} columns, got {}", x.cols())));
    }
    let omegas = afs.interval.frequencies(afs.m_count);
    let mut features = Matrix::zeros(x.rows(), afs.num_features());
    for i in 0..x.rows() {
        let row = features.row_mut(i);
        row[0] = dims as f64;
        for d in 0..dims {
            let v = x[(i, d)];
            afs.interval.check(v)?;
            let off = block_offset(afs.m_count, d);
            write_trig(&omegas, v - afs.interval.a, &mut row[off..off + 2 * afs.m_count]);
        }
    }
    Ok((features, afs.kuu()?))
}
