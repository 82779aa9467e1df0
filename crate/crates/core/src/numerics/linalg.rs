//! Factorizations and solves on dense matrices.

use serde::{Deserialize, Serialize};

use super::matrix::{gemm_into, Matrix, View};
use crate::error::{Error, Result};

/// Jitter escalation used when a Cholesky factorization fails.
///
/// The first attempt adds nothing. Attempt `k >= 1` adds
/// `base_scale * mean(diag) * 10^(k-1)` to the diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub max_attempts: usize,
    pub base_scale: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy { max_attempts: 5, base_scale: 1e-8 }
    }
}

/// Lower Cholesky factor together with the jitter that was needed to get it.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    pub l: Matrix,
    pub jitter: f64,
    pub attempts: usize,
}

const SYMMETRY_TOL: f64 = 1e-10;

/// Factorizes a symmetric matrix as `L Lᵀ`, escalating diagonal jitter on failure.
pub fn cholesky(a: &Matrix, policy: JitterPolicy) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(Error::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let n = a.rows();
    let mean_diag = if n == 0 { 1.0 } else { a.trace() / n as f64 };
    let base = policy.base_scale * if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut jitter = 0.0;
    for attempt in 0..=policy.max_attempts {
        if attempt > 0 {
            jitter = base * 10f64.powi(attempt as i32 - 1);
        }
        if let Some(l) = cholesky_with_jitter(a, jitter) {
            if attempt > 0 {
                log::debug!("cholesky needed jitter {jitter:e} after {attempt} retries");
            }
            return Ok(CholeskyFactor { l, jitter, attempts: attempt + 1 });
        }
    }
    Err(Error::NotPositiveDefinite { attempts: policy.max_attempts + 1, jitter })
}

fn cholesky_with_jitter(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = {
                let (ri, rj) = (l.row(i), l.row(j));
                ri[..j].iter().zip(&rj[..j]).map(|(x, y)| x * y).sum()
            };
            let mut s = a[(i, j)] - dot;
            if i == j {
                s += jitter;
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Which system [`tri_solve`] solves for a lower-triangular `L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriSide {
    /// `L X = B`
    Lower,
    /// `Lᵀ X = B`
    LowerTranspose,
}

const BLOCK: usize = 48;

/// Solves `L X = B` or `Lᵀ X = B` for lower-triangular `L`.
pub fn tri_solve(l: &Matrix, b: &Matrix, side: TriSide) -> Result<Matrix> {
    if !l.is_square() {
        return Err(Error::NotSquare { rows: l.rows(), cols: l.cols() });
    }
    if l.rows() != b.rows() {
        return Err(Error::shape(
            "tri_solve",
            format!("L is {}x{} but B has {} rows", l.rows(), l.cols(), b.rows()),
        ));
    }
    for i in 0..l.rows() {
        if l[(i, i)] == 0.0 {
            return Err(Error::SingularTriangular(i));
        }
    }
    let mut x = b.clone();
    match side {
        TriSide::Lower => solve_lower(l, &mut x),
        TriSide::LowerTranspose => solve_lower_transpose(l, &mut x),
    }
    Ok(x)
}

fn solve_lower(l: &Matrix, x: &mut Matrix) {
    let n = l.rows();
    let m = x.cols();
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + BLOCK).min(n);
        if i0 > 0 && m > 0 {
            let (done, rest) = x.data_mut().split_at_mut(i0 * m);
            let solved = View { data: done, offset: 0, rows: i0, cols: m, rs: m as isize, cs: 1 };
            let lblock = View::block(l, i0, 0, i1 - i0, i0);
            gemm_into(-1.0, lblock, solved, 1.0, rest, 0, m as isize, i1 - i0, m);
        }
        for i in i0..i1 {
            for k in i0..i {
                let lik = l[(i, k)];
                if lik != 0.0 {
                    let (head, tail) = x.data_mut().split_at_mut(i * m);
                    let rk = &head[k * m..(k + 1) * m];
                    for (xi, xk) in tail[..m].iter_mut().zip(rk) {
                        *xi -= lik * xk;
                    }
                }
            }
            let d = l[(i, i)];
            for v in x.row_mut(i) {
                *v /= d;
            }
        }
        i0 = i1;
    }
}

fn solve_lower_transpose(l: &Matrix, x: &mut Matrix) {
    let n = l.rows();
    let m = x.cols();
    let mut i1 = n;
    while i1 > 0 {
        let i0 = i1.saturating_sub(BLOCK);
        if i1 < n && m > 0 {
            let (head, done) = x.data_mut().split_at_mut(i1 * m);
            let solved = View { data: done, offset: 0, rows: n - i1, cols: m, rs: m as isize, cs: 1 };
            // (L[i1..n, i0..i1])ᵀ
            let lt = View::block(l, i1, i0, n - i1, i1 - i0).t();
            gemm_into(-1.0, lt, solved, 1.0, head, i0 * m, m as isize, i1 - i0, m);
        }
        for i in (i0..i1).rev() {
            for k in (i + 1)..i1 {
                let lki = l[(k, i)];
                if lki != 0.0 {
                    let (head, tail) = x.data_mut().split_at_mut(k * m);
                    let rk = &tail[..m];
                    for (xi, xk) in head[i * m..(i + 1) * m].iter_mut().zip(rk) {
                        *xi -= lki * xk;
                    }
                }
            }
            let d = l[(i, i)];
            for v in x.row_mut(i) {
                *v /= d;
            }
        }
        i1 = i0;
    }
}

/// `log Σ exp(v_i)` computed without overflow.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("logsumexp"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if !max.is_finite() {
        return Ok(max);
    }
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

/// `log det(A)` from the Cholesky factor of `A`.
pub fn logdet_from_cholesky(l: &Matrix) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Solves `A X = B` given the Cholesky factor of `A`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let y = tri_solve(l, b, TriSide::Lower)?;
    tri_solve(l, &y, TriSide::LowerTranspose)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns. Intended for validation on small matrices.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !a.is_square() {
        return Err(Error::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..i {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Matrix) -> Result<f64> {
    let (vals, _) = symmetric_eigen(a)?;
    Ok(vals.first().copied().unwrap_or(f64::INFINITY))
}

/// General inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap_or(col);
        if m[(pivot, col)] == 0.0 {
            return Err(Error::SingularTriangular(col));
        }
        if pivot != col {
            for k in 0..n {
                let (x, y) = (m[(col, k)], m[(pivot, k)]);
                m[(col, k)] = y;
                m[(pivot, k)] = x;
                let (x, y) = (inv[(col, k)], inv[(pivot, k)]);
                inv[(col, k)] = y;
                inv[(pivot, k)] = x;
            }
        }
        let d = m[(col, col)];
        for k in 0..n {
            m[(col, k)] /= d;
            inv[(col, k)] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[(r, col)];
                if f != 0.0 {
                    for k in 0..n {
                        m[(r, k)] -= f * m[(col, k)];
                        inv[(r, k)] -= f * inv[(col, k)];
                    }
                }
            }
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reconstruct(l: &Matrix) -> Matrix {
        l.matmul_nt(l).unwrap()
    }

    fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    #[test]
    fn cholesky_of_identity_is_identity() {
        let f = cholesky(&Matrix::identity(3), JitterPolicy::default()).unwrap();
        assert_eq!(f.l, Matrix::identity(3));
        assert_eq!(f.jitter, 0.0);
    }

    #[test]
    fn cholesky_two_by_two_by_hand() {
        let a = Matrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]).unwrap();
        let f = cholesky(&a, JitterPolicy::default()).unwrap();
        let want = Matrix::from_rows(&[[2.0, 0.0], [1.0, 2f64.sqrt()]]).unwrap();
        assert!(f.l.sub(&want).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite_after_escalation() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        match cholesky(&a, JitterPolicy::default()) {
            Err(Error::NotPositiveDefinite { attempts, jitter }) => {
                assert_eq!(attempts, 6);
                assert!((jitter - 1e-4).abs() < 1e-18);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_rejects_non_square_and_asymmetric() {
        assert!(matches!(cholesky(&Matrix::zeros(2, 3), JitterPolicy::default()), Err(Error::NotSquare { .. })));
        let a = Matrix::from_rows(&[[2.0, 1.0], [0.0, 2.0]]).unwrap();
        assert!(matches!(cholesky(&a, JitterPolicy::default()), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn cholesky_reports_jitter_on_singular_psd() {
        // Rank one: needs jitter, and gets it.
        let a = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let f = cholesky(&a, JitterPolicy::default()).unwrap();
        assert!(f.jitter > 0.0);
        let mut aj = a.clone();
        aj.add_diagonal(f.jitter);
        assert!(rel_frobenius(&reconstruct(&f.l), &aj) < 1e-8);
    }

    #[test]
    fn tri_solve_cases() {
        let b = Matrix::from_rows(&[[1.5, -2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(tri_solve(&Matrix::identity(2), &b, TriSide::Lower).unwrap(), b);
        let l = Matrix::from_rows(&[[2.0, 0.0], [1.0, 1.0]]).unwrap();
        let x = tri_solve(&l, &Matrix::column_vector(vec![2.0, 3.0]), TriSide::Lower).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0]);
        assert!(matches!(
            tri_solve(&l, &Matrix::zeros(3, 1), TriSide::Lower),
            Err(Error::Shape { .. })
        ));
        let singular = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!(matches!(
            tri_solve(&singular, &Matrix::zeros(2, 1), TriSide::Lower),
            Err(Error::SingularTriangular(1))
        ));
    }

    #[test]
    fn logsumexp_cases() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let v = logsumexp(&[-1000.0, -1000.0]).unwrap();
        assert!((v - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[3.25]).unwrap(), 3.25);
        assert!(matches!(logsumexp(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn eigen_and_inverse_on_known_matrix() {
        let a = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12 && (vals[1] - 3.0).abs() < 1e-12);
        let av = a.matmul(&vecs).unwrap();
        for c in 0..2 {
            for r in 0..2 {
                assert!((av[(r, c)] - vals[c] * vecs[(r, c)]).abs() < 1e-12);
            }
        }
        let inv = inverse(&a).unwrap();
        assert!(a.matmul(&inv).unwrap().sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-14);
    }

    fn random_matrix(n: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = crate::numerics::Rng::new(seed);
        Matrix::from_vec(n, m, rng.standard_normal(n * m)).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn cholesky_reconstructs_random_psd(n in 1usize..70, seed in 0u64..1000) {
            let b = random_matrix(n, n, seed);
            let mut a = b.matmul_tn(&b).unwrap();
            a.add_diagonal(1.0);
            let f = cholesky(&a, JitterPolicy::default()).unwrap();
            prop_assert!(rel_frobenius(&reconstruct(&f.l), &a) < 1e-8);
        }

        #[test]
        fn tri_solve_inverts_multiplication(n in 1usize..120, m in 1usize..7, seed in 0u64..1000) {
            let mut l = random_matrix(n, n, seed).lower_triangle();
            for i in 0..n {
                l[(i, i)] = 2.0 + l[(i, i)].abs();
            }
            let l = l.scale(1.0 / (n as f64).sqrt());
            let x = random_matrix(n, m, seed + 7);
            let b = l.matmul(&x).unwrap();
            let got = tri_solve(&l, &b, TriSide::Lower).unwrap();
            prop_assert!(got.sub(&x).unwrap().max_abs() < 1e-9);
            let bt = l.transpose().matmul(&x).unwrap();
            let got_t = tri_solve(&l, &bt, TriSide::LowerTranspose).unwrap();
            prop_assert!(got_t.sub(&x).unwrap().max_abs() < 1e-9);
        }

        #[test]
        fn logsumexp_shift_invariance(v in proptest::collection::vec(-50.0f64..50.0, 1..20), c in -1e3f64..1e3) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = logsumexp(&shifted).unwrap();
            let rhs = logsumexp(&v).unwrap() + c;
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + c.abs()));
        }
    }
}
