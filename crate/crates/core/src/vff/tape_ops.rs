use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{MaternFamily, MaternKernel};
use crate::numerics::Matrix;

use super::{assemble_additive, block_offset, kuu_with_derivative, Interval};

/// Cross-covariance between additive Fourier inducing variables and
/// function values: maps `h` (N x D) to a `(2MD+1) x N` matrix.
///
/// Inputs outside the interval are not rejected here; the basis is
/// periodic, and keeping inputs inside is the caller's job.
pub struct FourierFeatureMap {
    pub interval: Interval,
    pub m_count: usize,
}

impl CustomOp for FourierFeatureMap {
    fn name(&self) -> &'static str {
        "fourier_feature_map"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        let h = single(inputs, self.name())?;
        let (n, dims, m) = (h.rows(), h.cols(), self.m_count);
        let mut out = Matrix::zeros(2 * m * dims + 1, n);
        out.row_mut(0).fill(dims as f64);
        if m == 0 {
            return Ok(out);
        }
        let base = self.interval.frequencies(1)[0];
        let data = out.data_mut();
        for d in 0..dims {
            let off = block_offset(m, d);
            let (mut c1, mut s1) = (vec![0.0; n], vec![0.0; n]);
            for j in 0..n {
                (s1[j], c1[j]) = (base * (h[(j, d)] - self.interval.a())).sin_cos();
            }
            // Harmonics by angle addition, one contiguous row at a time.
            let (cos_rows, sin_rows) = data[off * n..(off + 2 * m) * n].split_at_mut(m * n);
            cos_rows[..n].copy_from_slice(&c1);
            sin_rows[..n].copy_from_slice(&s1);
            for k in 1..m {
                let (cp, cn) = cos_rows[(k - 1) * n..(k + 1) * n].split_at_mut(n);
                let (sp, sn) = sin_rows[(k - 1) * n..(k + 1) * n].split_at_mut(n);
                for j in 0..n {
                    cn[j] = cp[j] * c1[j] - sp[j] * s1[j];
                    sn[j] = sp[j] * c1[j] + cp[j] * s1[j];
                }
            }
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>> {
        let h = single(inputs, self.name())?;
        let (n, dims, m) = (h.rows(), h.cols(), self.m_count);
        let omegas = self.interval.frequencies(m);
        let mut gh = Matrix::zeros(n, dims);
        for d in 0..dims {
            let off = block_offset(m, d);
            let mut acc = vec![0.0; n];
            for (k, w) in omegas.iter().enumerate() {
                let (c, s) = (output.row(off + k), output.row(off + m + k));
                let (gc, gs) = (grad.row(off + k), grad.row(off + m + k));
                for j in 0..n {
                    acc[j] += w * (gs[j] * c[j] - gc[j] * s[j]);
                }
            }
            for (j, a) in acc.into_iter().enumerate() {
                gh[(j, d)] = a;
            }
        }
        Ok(vec![Some(gh)])
    }
}

fn single<'a>(inputs: &[&'a Matrix], op: &'static str) -> Result<&'a Matrix> {
    match inputs {
        [h] => Ok(h),
        _ => Err(Error::shape(op, "expected 1 input")),
    }
}

/// Closed-form additive Fourier-feature Kuu as a function of per-dimension
/// log-variances and log-lengthscales (both `D x 1`).
pub struct AdditiveVffKuu {
    pub interval: Interval,
    pub m_count: usize,
    pub family: MaternFamily,
}

impl AdditiveVffKuu {
    fn blocks(&self, lv: &Matrix, ll: &Matrix) -> Result<Vec<(Matrix, Matrix)>> {
        if lv.len() != ll.len() {
            return Err(Error::shape("additive_vff_kuu", format!("{} variances vs {} lengthscales", lv.len(), ll.len())));
        }
        lv.data()
            .iter()
            .zip(ll.data())
            .map(|(v, l)| kuu_with_derivative(&MaternKernel::new(self.family, v.exp(), l.exp())?, self.interval, self.m_count))
            .collect()
    }
}

impl CustomOp for AdditiveVffKuu {
    fn name(&self) -> &'static str {
        "additive_vff_kuu"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        let [lv, ll] = inputs else { return Err(Error::shape(self.name(), "expected 2 inputs")) };
        let blocks: Vec<Matrix> = self.blocks(lv, ll)?.into_iter().map(|(k, _)| k).collect();
        Ok(assemble_additive(&blocks, self.m_count, lv.len()))
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>> {
        let [lv, ll] = inputs else { return Err(Error::shape(self.name(), "expected 2 inputs")) };
        let dims = lv.len();
        let mut glv = Matrix::zeros(dims, 1);
        let mut gll = Matrix::zeros(dims, 1);
        for (d, (k, dk)) in self.blocks(lv, ll)?.into_iter().enumerate() {
            let off = block_offset(self.m_count, d);
            let map = |i: usize| if i == 0 { 0 } else { off + i - 1 };
            let (mut sv, mut sl) = (0.0, 0.0);
            for i in 0..k.rows() {
                for j in 0..k.cols() {
                    let g = grad[(map(i), map(j))];
                    sv -= g * k[(i, j)];
                    sl += g * dk[(i, j)];
                }
            }
            glv.data_mut()[d] = sv;
            gll.data_mut()[d] = sl;
        }
        Ok(vec![Some(glv), Some(gll)])
    }
}

pub fn vff_kuf_on_tape(tape: &mut Tape, interval: Interval, m_count: usize, h: Var) -> Result<Var> {
    tape.custom(Box::new(FourierFeatureMap { interval, m_count }), &[h])
}

pub fn vff_kuu_on_tape(
    tape: &mut Tape,
    interval: Interval,
    m_count: usize,
    family: MaternFamily,
    log_variance: Var,
    log_lengthscale: Var,
) -> Result<Var> {
    tape.custom(Box::new(AdditiveVffKuu { interval, m_count, family }), &[log_variance, log_lengthscale])
}
