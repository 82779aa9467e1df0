use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::MaternFamily;

/// Additive Matérn Gram `K[i, j] = Σ_d σ²_d k(|x_id − z_jd| / ℓ_d)` as one
/// tape node.
///
/// Inputs: `x` (N x D), `z` (M x D), log-variances (D x 1),
/// log-lengthscales (D x 1).
pub struct AdditiveMaternGram {
    pub family: MaternFamily,
}

impl CustomOp for AdditiveMaternGram {
    fn name(&self) -> &'static str {
        "additive_matern_gram"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        let [x, z, lv, ll] = unpack(inputs)?;
        let (n, m, dims) = (x.rows(), z.rows(), x.cols());
        let mut out = Matrix::zeros(n, m);
        for d in 0..dims {
            let var = lv.data()[d].exp();
            let inv_len = (-ll.data()[d]).exp();
            for i in 0..n {
                let xi = x[(i, d)];
                let row = out.row_mut(i);
                for (j, o) in row.iter_mut().enumerate() {
                    *o += var * self.family.unit((xi - z[(j, d)]).abs() * inv_len);
                }
            }
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>> {
        let [x, z, lv, ll] = unpack(inputs)?;
        let (n, m, dims) = (x.rows(), z.rows(), x.cols());
        let mut gx = Matrix::zeros(n, dims);
        let mut gz = Matrix::zeros(m, dims);
        let mut glv = Matrix::zeros(dims, 1);
        let mut gll = Matrix::zeros(dims, 1);
        for d in 0..dims {
            let var = lv.data()[d].exp();
            let inv_len = (-ll.data()[d]).exp();
            let (mut sv, mut sl) = (0.0, 0.0);
            for i in 0..n {
                let xi = x[(i, d)];
                let g = grad.row(i);
                let mut gxi = 0.0;
                for j in 0..m {
                    let diff = xi - z[(j, d)];
                    let u = diff.abs() * inv_len;
                    let k = var * self.family.unit(u);
                    let dku = var * self.family.unit_derivative(u);
                    sv += g[j] * k;
                    sl -= g[j] * dku * u;
                    // d/dx = dk/du · sign(diff) / ℓ; zero at coincident points.
                    let dx = if diff > 0.0 {
                        dku * inv_len
                    } else if diff < 0.0 {
                        -dku * inv_len
                    } else {
                        0.0
                    };
                    gxi += g[j] * dx;
                    gz[(j, d)] -= g[j] * dx;
                }
                gx[(i, d)] = gxi;
            }
            glv.data_mut()[d] = sv;
            gll.data_mut()[d] = sl;
        }
        Ok(vec![Some(gx), Some(gz), Some(glv), Some(gll)])
    }
}

fn unpack<'a>(inputs: &[&'a Matrix]) -> Result<[&'a Matrix; 4]> {
    let [x, z, lv, ll]: [&Matrix; 4] =
        inputs.try_into().map_err(|_| Error::shape("additive_matern_gram", "expected 4 inputs"))?;
    let dims = x.cols();
    if z.cols() != dims || lv.len() != dims || ll.len() != dims {
        return Err(Error::shape(
            "additive_matern_gram",
            format!("x has {dims} dims, z {}, {} variances, {} lengthscales", z.cols(), lv.len(), ll.len()),
        ));
    }
    Ok([x, z, lv, ll])
}

pub fn gram_on_tape(
    tape: &mut Tape,
    family: MaternFamily,
    x: Var,
    z: Var,
    log_variance: Var,
    log_lengthscale: Var,
) -> Result<Var> {
    tape.custom(Box::new(AdditiveMaternGram { family }), &[x, z, log_variance, log_lengthscale])
}

/// `k(x, x)` for `n` points as an `n x 1` column; stationary, so it depends
/// on the variances alone.
pub fn kff_diag_on_tape(tape: &mut Tape, log_variance: Var, n: usize) -> Result<Var> {
    let v = tape.exp(log_variance);
    let total = tape.sum(v);
    tape.broadcast(total, n, 1)
}
