//! Reverse-mode differentiation of scalar objectives over a [`ParamSet`].

mod params;
mod tape;

pub use params::{Bindings, ParamSet};
pub use tape::{cholesky_adjoint, CustomOp, Gradients, Tape, Var};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::JitterPolicy;

/// Relative error above which [`gradcheck`] flags a slot.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Objective value and its gradient with respect to every slot.
///
/// Slots the objective never touched get a zero gradient.
pub fn gradient<F>(params: &ParamSet, objective: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Tape, &Bindings) -> Result<Var>,
{
    gradient_with(params, JitterPolicy::default(), objective)
}

/// [`gradient`] with a non-default Cholesky jitter policy.
pub fn gradient_with<F>(params: &ParamSet, jitter: JitterPolicy, objective: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::with_jitter(jitter);
    let bindings = params.bind(&mut tape, true);
    let root = objective(&mut tape, &bindings)?;
    let value = tape.scalar(root)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {value}")));
    }
    let grads = tape.backward(root)?;
    let mut out = params.zeros_like();
    for ((_, var), (_, slot)) in bindings.iter().zip(out.iter_mut()) {
        if let Some(g) = grads.wrt(var) {
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
            *slot = g.clone();
        }
    }
    Ok((value, out))
}

/// Objective value only; nothing is tracked for differentiation.
pub fn evaluate<F>(params: &ParamSet, objective: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bindings = params.bind(&mut tape, false);
    let root = objective(&mut tape, &bindings)?;
    tape.scalar(root)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientReport {
    pub slot: String,
    /// Flat index of the worst coordinate within the slot.
    pub index: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.relative_error <= GRADCHECK_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences of step `h`.
///
/// Returns one report per slot holding its worst coordinate. The objective
/// must be deterministic, so any sampling inside it needs a fixed seed.
pub fn gradcheck<F>(params: &ParamSet, mut objective: F, h: f64) -> Result<Vec<GradientReport>>
where
    F: FnMut(&mut Tape, &Bindings) -> Result<Var>,
{
    let (_, analytic) = gradient(params, &mut objective)?;
    let mut reports = Vec::with_capacity(params.len());
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let n = params.require(&name)?.len();
        let grad = analytic.require(&name)?;
        let mut worst: Option<GradientReport> = None;
        for k in 0..n {
            let base = params.require(&name)?.data()[k];
            probe.get_mut(&name).expect("slot exists").data_mut()[k] = base + h;
            let plus = evaluate(&probe, &mut objective)?;
            probe.get_mut(&name).expect("slot exists").data_mut()[k] = base - h;
            let minus = evaluate(&probe, &mut objective)?;
            probe.get_mut(&name).expect("slot exists").data_mut()[k] = base;
            let fd = (plus - minus) / (2.0 * h);
            let ga = grad.data()[k];
            let rel = relative_error(ga, fd);
            if worst.as_ref().is_none_or(|w| rel > w.relative_error) {
                worst = Some(GradientReport {
                    slot: name.clone(),
                    index: k,
                    analytic: ga,
                    finite_difference: fd,
                    relative_error: rel,
                });
            }
        }
        if let Some(w) = worst {
            reports.push(w);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{inverse, Matrix, TriSide};
    use proptest::prelude::*;

    fn single(name: &str, m: Matrix) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, m);
        p
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let p = single("p", Matrix::scalar(3.0));
        let (v, g) = gradient(&p, |t, b| {
            let x = b.get("p")?;
            let sq = t.square(x);
            Ok(t.sum(sq))
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g.get("p").unwrap().data(), &[6.0]);
    }

    fn logdet(t: &mut Tape, a: Var) -> Result<Var> {
        let l = t.cholesky(a)?;
        let d = t.diag(l)?;
        let ld = t.log(d);
        let s = t.sum(ld);
        Ok(t.scale(s, 2.0))
    }

    #[test]
    fn logdet_gradient_is_inverse_transpose() {
        let a = Matrix::from_rows(&[[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]]).unwrap();
        let p = single("a", a.clone());
        let (v, g) = gradient(&p, |t, b| logdet(t, b.get("a")?)).unwrap();
        let inv = inverse(&a).unwrap().transpose();
        let expected_det = 4.0 * (3.0 * 2.0 - 0.04) - 1.0 * (2.0 - 0.1) + 0.5 * (0.2 - 1.5);
        assert!((v - f64::ln(expected_det)).abs() < 1e-12);
        let ga = g.get("a").unwrap();
        for (x, y) in ga.data().iter().zip(inv.data()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn quadratic_objective_passes_gradcheck() {
        let p = single("w", Matrix::from_rows(&[[0.3, -1.2], [2.0, 0.7]]).unwrap());
        let reports = gradcheck(
            &p,
            |t, b| {
                let w = b.get("w")?;
                let ww = t.matmul_tn(w, w)?;
                let sq = t.square(ww);
                Ok(t.sum(sq))
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(reports.len(), 1);
        assert!(reports.iter().all(GradientReport::passed), "{reports:?}");
    }

    struct WrongSquare;

    impl CustomOp for WrongSquare {
        fn name(&self) -> &'static str {
            "wrong_square"
        }
        fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
            Ok(inputs[0].map(|x| x * x))
        }
        fn backward(&self, inputs: &[&Matrix], _: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>> {
            // Deliberately off by a factor of 1.5.
            Ok(vec![Some(grad.zip_map(inputs[0], |g, x| 3.0 * g * x)?)])
        }
    }

    #[test]
    fn wrong_adjoint_is_flagged() {
        let p = single("x", Matrix::column_vector(vec![0.5, -2.0]));
        let reports = gradcheck(
            &p,
            |t, b| {
                let y = t.custom(Box::new(WrongSquare), &[b.get("x")?])?;
                Ok(t.sum(y))
            },
            1e-5,
        )
        .unwrap();
        assert!(!reports[0].passed());
        assert!((reports[0].relative_error - 1.0 / 3.0).abs() < 1e-6);
    }

    /// Exercises every primitive so each adjoint is checked at least once.
    fn composite(t: &mut Tape, b: &Bindings) -> Result<Var> {
        let a = b.get("a")?;
        let m = b.get("m")?;
        let s = b.get("s")?;
        let r = b.get("r")?;
        let ata = t.matmul_tn(a, a)?;
        let spd = t.offset(ata, 0.0);
        let eye = t.constant(Matrix::identity(3));
        let spd = t.add(spd, eye)?;
        let l = t.cholesky(spd)?;
        let x = t.tri_solve(l, m, TriSide::Lower)?;
        let y = t.tri_solve(l, x, TriSide::LowerTranspose)?;
        let es = t.exp(s);
        let ys = t.scale_by(y, es)?;
        let sq = t.square(ys);
        let sqrt = t.sqrt(sq);
        let lg = t.offset(sqrt, 1.0);
        let lg = t.log(lg);
        let added = t.add_scalar(lg, s)?;
        let rowed = t.add_row(added, r)?;
        let tiled = t.tile_rows(rowed, 2);
        let col = t.column(tiled, 1)?;
        let c0 = t.column(tiled, 0)?;
        let st = t.hstack(&[col, c0, col])?;
        let cl = t.clamp_min(st, -0.5);
        let cs = t.sum_cols(cl);
        let rs = t.sum_rows(cl);
        let mm = t.matmul_nt(cs, cs)?;
        let tr = t.transpose(mm);
        let low = t.tril(tr);
        let dg = t.diag(low)?;
        let d1 = t.sum(dg);
        let d2 = t.sum(rs);
        let m2 = t.matmul_nt(rs, st)?;
        let m2 = t.matmul(m2, st)?;
        let m2 = t.transpose(m2);
        let m2 = t.sum(m2);
        let ll = t.mul(l, l)?;
        let ll = t.sum(ll);
        let bc = t.broadcast(s, 2, 2)?;
        let bc = t.sum(bc);
        let z = t.sub(d1, d2)?;
        let z = t.add(z, m2)?;
        let z = t.add(z, ll)?;
        let z = t.add(z, bc)?;
        Ok(t.scale(z, 0.01))
    }

    fn composite_params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a", Matrix::from_rows(&[[1.0, 0.2, -0.3], [0.4, 1.5, 0.1], [-0.2, 0.3, 0.9]]).unwrap());
        p.insert("m", Matrix::from_rows(&[[0.5, -1.0], [0.3, 0.8], [-0.7, 0.2]]).unwrap());
        p.insert("s", Matrix::scalar(0.3));
        p.insert("r", Matrix::row_vector(vec![0.1, -0.2]));
        p
    }

    #[test]
    fn every_primitive_passes_gradcheck() {
        let reports = gradcheck(&composite_params(), composite, 1e-6).unwrap();
        assert_eq!(reports.len(), 4);
        for r in &reports {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn repeated_gradients_are_bit_identical() {
        let p = composite_params();
        let a = gradient(&p, composite).unwrap();
        let b = gradient(&p, composite).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let p = single("x", Matrix::scalar(-1.0));
        let err = gradient(&p, |t, b| {
            let l = t.log(b.get("x")?);
            Ok(t.sum(l))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn shape_drift_is_detected() {
        let a = single("x", Matrix::zeros(2, 1));
        let b = single("x", Matrix::zeros(3, 1));
        assert!(a.check_compatible(&b).is_err());
        assert!(a.clone().add_scaled(&b, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn gradient_of_sum_is_sum_of_gradients(v in proptest::collection::vec(-2.0f64..2.0, 4), c in 0.1f64..3.0) {
            let p = single("x", Matrix::from_vec(2, 2, v).unwrap());
            let f = |t: &mut Tape, b: &Bindings| -> Result<Var> {
                let x = b.get("x")?;
                let xx = t.matmul(x, x)?;
                let e = t.exp(xx);
                Ok(t.sum(e))
            };
            let g = move |t: &mut Tape, b: &Bindings| -> Result<Var> {
                let x = b.get("x")?;
                let sq = t.square(x);
                let sc = t.scale(sq, c);
                let s = t.sum(sc);
                Ok(t.sqrt(s))
            };
            let (_, gf) = gradient(&p, f).unwrap();
            let (_, gg) = gradient(&p, g).unwrap();
            let (_, gs) = gradient(&p, |t, b| {
                let a = f(t, b)?;
                let bb = g(t, b)?;
                t.add(a, bb)
            }).unwrap();
            let mut sum = gf.clone();
            sum.add_scaled(&gg, 1.0).unwrap();
            for (x, y) in sum.get("x").unwrap().data().iter().zip(gs.get("x").unwrap().data()) {
                prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
            }
        }
    }
}
