//! Reverse-mode tape over dense matrix values.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{cholesky, tri_solve, JitterPolicy, Matrix, TriSide};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A fused operation with a hand-written adjoint.
///
/// `backward` returns one entry per input: the vector-Jacobian product of
/// `grad` (shaped like the output) with respect to that input, or `None`
/// when the input is treated as constant.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix>;
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    ScaleBy(usize, usize),
    AddScalar(usize, usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    MatMulTN(usize, usize),
    MatMulNT(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    ClampMin(usize, f64),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Diag(usize),
    Tril(usize),
    Cholesky(usize),
    TriSolve(usize, usize, TriSide),
    TileRows(usize, usize),
    HStack(Vec<usize>),
    Column(usize, usize),
    Broadcast(usize),
    Custom(Box<dyn CustomOp>, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | ScaleBy(a, b) | AddScalar(a, b) | AddRow(a, b) | MatMul(a, b)
            | MatMulTN(a, b) | MatMulNT(a, b) | TriSolve(a, b, _) => vec![*a, *b],
            Scale(a, _) | Offset(a) | Transpose(a) | Exp(a) | Log(a) | Sqrt(a) | Square(a) | ClampMin(a, _)
            | Sum(a) | SumRows(a) | SumCols(a) | Diag(a) | Tril(a) | Cholesky(a) | TileRows(a, _)
            | Column(a, _) | Broadcast(a) => vec![*a],
            HStack(v) | Custom(_, v) => v.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Records matrix operations so that gradients of a scalar output can be
/// propagated back to the leaves.
pub struct Tape {
    nodes: Vec<Node>,
    jitter: JitterPolicy,
    max_jitter: f64,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::shape(op, format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), jitter: JitterPolicy::default(), max_jitter: 0.0 }
    }

    pub fn with_jitter(jitter: JitterPolicy) -> Self {
        Tape { jitter, ..Tape::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest jitter any Cholesky on this tape needed.
    pub fn max_jitter(&self) -> f64 {
        self.max_jitter
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients are not propagated to.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).to_scalar()
    }

    fn val(&self, i: usize) -> &Matrix {
        &self.nodes[i].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a.0).add(self.val(b.0)).map_err(|_| shape_err("add", self.val(a.0), self.val(b.0)))?;
        Ok(self.push(Op::Add(a.0, b.0), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a.0).sub(self.val(b.0)).map_err(|_| shape_err("sub", self.val(a.0), self.val(b.0)))?;
        Ok(self.push(Op::Sub(a.0, b.0), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a.0).hadamard(self.val(b.0)).map_err(|_| shape_err("mul", self.val(a.0), self.val(b.0)))?;
        Ok(self.push(Op::Mul(a.0, b.0), v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a.0).scale(c);
        self.push(Op::Scale(a.0, c), v)
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a.0).map(|x| x + c);
        self.push(Op::Offset(a.0), v)
    }

    /// `a * s` where `s` is a 1x1 node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.scalar(s)?;
        let v = self.val(a.0).scale(c);
        Ok(self.push(Op::ScaleBy(a.0, s.0), v))
    }

    /// `a + s` elementwise where `s` is a 1x1 node.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.scalar(s)?;
        let v = self.val(a.0).map(|x| x + c);
        Ok(self.push(Op::AddScalar(a.0, s.0), v))
    }

    /// Adds the `1 x m` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (av, rv) = (self.val(a.0), self.val(r.0));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", av, rv));
        }
        let mut v = av.clone();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(rv.row(0)) {
                *x += y;
            }
        }
        Ok(self.push(Op::AddRow(a.0, r.0), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a.0).matmul(self.val(b.0))?;
        Ok(self.push(Op::MatMul(a.0, b.0), v))
    }

    /// `aᵀ b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a.0).matmul_tn(self.val(b.0))?;
        Ok(self.push(Op::MatMulTN(a.0, b.0), v))
    }

    /// `a bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a.0).matmul_nt(self.val(b.0))?;
        Ok(self.push(Op::MatMulNT(a.0, b.0), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.val(a.0).transpose();
        self.push(Op::Transpose(a.0), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(f64::exp);
        self.push(Op::Exp(a.0), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(f64::ln);
        self.push(Op::Log(a.0), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(f64::sqrt);
        self.push(Op::Sqrt(a.0), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(|x| x * x);
        self.push(Op::Square(a.0), v)
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.val(a.0).map(|x| x.max(floor));
        self.push(Op::ClampMin(a.0, floor), v)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.val(a.0).sum());
        self.push(Op::Sum(a.0), v)
    }

    /// Column sums, `1 x cols`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.val(a.0);
        let mut out = vec![0.0; av.cols()];
        for i in 0..av.rows() {
            for (o, x) in out.iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        self.push(Op::SumRows(a.0), Matrix::row_vector(out))
    }

    /// Row sums, `rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.val(a.0);
        let out = (0..av.rows()).map(|i| av.row(i).iter().sum()).collect();
        self.push(Op::SumCols(a.0), Matrix::column_vector(out))
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a.0);
        if !av.is_square() {
            return Err(Error::NotSquare { rows: av.rows(), cols: av.cols() });
        }
        let v = Matrix::column_vector(av.diagonal());
        Ok(self.push(Op::Diag(a.0), v))
    }

    /// Lower triangle; entries above the diagonal get no gradient.
    pub fn tril(&mut self, a: Var) -> Var {
        let v = self.val(a.0).lower_triangle();
        self.push(Op::Tril(a.0), v)
    }

    /// Lower Cholesky factor, with the tape's jitter policy.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let f = cholesky(self.val(a.0), self.jitter)?;
        self.max_jitter = self.max_jitter.max(f.jitter);
        Ok(self.push(Op::Cholesky(a.0), f.l))
    }

    pub fn tri_solve(&mut self, l: Var, b: Var, side: TriSide) -> Result<Var> {
        let v = tri_solve(self.val(l.0), self.val(b.0), side)?;
        Ok(self.push(Op::TriSolve(l.0, b.0, side), v))
    }

    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let v = self.val(a.0).tile_rows(times);
        self.push(Op::TileRows(a.0, times), v)
    }

    /// Concatenates columns of equally tall nodes.
    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("hstack"))?;
        let rows = self.val(first.0).rows();
        let mut cols = 0;
        for p in parts {
            let pv = self.val(p.0);
            if pv.rows() != rows {
                return Err(shape_err("hstack", self.val(first.0), pv));
            }
            cols += pv.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            let pv = self.val(p.0);
            for i in 0..rows {
                out.row_mut(i)[c0..c0 + pv.cols()].copy_from_slice(pv.row(i));
            }
            c0 += pv.cols();
        }
        Ok(self.push(Op::HStack(parts.iter().map(|p| p.0).collect()), out))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let av = self.val(a.0);
        if j >= av.cols() {
            return Err(Error::shape("column", format!("column {j} of {}x{}", av.rows(), av.cols())));
        }
        let v = Matrix::column_vector(av.column(j));
        Ok(self.push(Op::Column(a.0, j), v))
    }

    /// Fills a `rows x cols` matrix with the value of the 1x1 node `s`.
    pub fn broadcast(&mut self, s: Var, rows: usize, cols: usize) -> Result<Var> {
        let c = self.scalar(s)?;
        Ok(self.push(Op::Broadcast(s.0), Matrix::filled(rows, cols, c)))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let v = {
            let vals: Vec<&Matrix> = inputs.iter().map(|i| self.val(i.0)).collect();
            op.forward(&vals)?
        };
        Ok(self.push(Op::Custom(op, inputs.iter().map(|i| i.0).collect()), v))
    }

    /// Propagates `d root / d node` back from the 1x1 node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.val(root.0);
        if rv.shape() != (1, 1) {
            return Err(Error::shape("backward", format!("root must be 1x1, got {}x{}", rv.rows(), rv.cols())));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let needs = |j: usize| self.nodes[j].needs_grad;
        let mut acc = |j: usize, m: Matrix| -> Result<()> {
            if !self.nodes[j].needs_grad {
                return Ok(());
            }
            match &mut grads[j] {
                Some(existing) => existing.add_assign(&m),
                slot @ None => {
                    *slot = Some(m);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone())?;
                }
                if needs(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone())?;
                }
                if needs(*b) {
                    acc(*b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.hadamard(self.val(*b))?)?;
                }
                if needs(*b) {
                    acc(*b, g.hadamard(self.val(*a))?)?;
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::Offset(a) => acc(*a, g.clone())?,
            Op::ScaleBy(a, s) => {
                if needs(*a) {
                    acc(*a, g.scale(self.val(*s).data()[0]))?;
                }
                if needs(*s) {
                    let d: f64 = g.data().iter().zip(self.val(*a).data()).map(|(x, y)| x * y).sum();
                    acc(*s, Matrix::scalar(d))?;
                }
            }
            Op::AddScalar(a, s) => {
                if needs(*a) {
                    acc(*a, g.clone())?;
                }
                if needs(*s) {
                    acc(*s, Matrix::scalar(g.sum()))?;
                }
            }
            Op::AddRow(a, r) => {
                if needs(*a) {
                    acc(*a, g.clone())?;
                }
                if needs(*r) {
                    let mut col = vec![0.0; g.cols()];
                    for k in 0..g.rows() {
                        for (c, x) in col.iter_mut().zip(g.row(k)) {
                            *c += x;
                        }
                    }
                    acc(*r, Matrix::row_vector(col))?;
                }
            }
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_nt(self.val(*b))?)?;
                }
                if needs(*b) {
                    acc(*b, self.val(*a).matmul_tn(g)?)?;
                }
            }
            Op::MatMulTN(a, b) => {
                if needs(*a) {
                    acc(*a, self.val(*b).matmul_nt(g)?)?;
                }
                if needs(*b) {
                    acc(*b, self.val(*a).matmul(g)?)?;
                }
            }
            Op::MatMulNT(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul(self.val(*b))?)?;
                }
                if needs(*b) {
                    acc(*b, g.matmul_tn(self.val(*a))?)?;
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Exp(a) => acc(*a, g.hadamard(out)?)?,
            Op::Log(a) => acc(*a, g.zip_map(self.val(*a), |x, y| x / y)?)?,
            Op::Sqrt(a) => acc(*a, g.zip_map(out, |x, y| 0.5 * x / y)?)?,
            Op::Square(a) => acc(*a, g.zip_map(self.val(*a), |x, y| 2.0 * x * y)?)?,
            Op::ClampMin(a, floor) => {
                let f = *floor;
                acc(*a, g.zip_map(self.val(*a), |x, y| if y > f { x } else { 0.0 })?)?
            }
            Op::Sum(a) => {
                let av = self.val(*a);
                acc(*a, Matrix::filled(av.rows(), av.cols(), g.data()[0]))?
            }
            Op::SumRows(a) => {
                let av = self.val(*a);
                let mut m = Matrix::zeros(av.rows(), av.cols());
                for k in 0..av.rows() {
                    m.row_mut(k).copy_from_slice(g.row(0));
                }
                acc(*a, m)?
            }
            Op::SumCols(a) => {
                let av = self.val(*a);
                let m = Matrix::from_fn(av.rows(), av.cols(), |r, _| g.data()[r]);
                acc(*a, m)?
            }
            Op::Diag(a) => {
                let n = self.val(*a).rows();
                let mut m = Matrix::zeros(n, n);
                for k in 0..n {
                    m[(k, k)] = g.data()[k];
                }
                acc(*a, m)?
            }
            Op::Tril(a) => acc(*a, g.lower_triangle())?,
            Op::Cholesky(a) => acc(*a, cholesky_adjoint(out, g)?)?,
            Op::TriSolve(l, b, side) => {
                let lv = self.val(*l);
                match side {
                    TriSide::Lower => {
                        let bbar = tri_solve(lv, g, TriSide::LowerTranspose)?;
                        if needs(*l) {
                            acc(*l, bbar.matmul_nt(out)?.scale(-1.0).lower_triangle())?;
                        }
                        if needs(*b) {
                            acc(*b, bbar)?;
                        }
                    }
                    TriSide::LowerTranspose => {
                        let bbar = tri_solve(lv, g, TriSide::Lower)?;
                        if needs(*l) {
                            acc(*l, out.matmul_nt(&bbar)?.scale(-1.0).lower_triangle())?;
                        }
                        if needs(*b) {
                            acc(*b, bbar)?;
                        }
                    }
                }
            }
            Op::TileRows(a, times) => {
                let av = self.val(*a);
                let block = av.len();
                let mut m = Matrix::zeros(av.rows(), av.cols());
                for t in 0..*times {
                    for (x, y) in m.data_mut().iter_mut().zip(&g.data()[t * block..(t + 1) * block]) {
                        *x += y;
                    }
                }
                acc(*a, m)?
            }
            Op::HStack(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.val(p).cols();
                    if needs(p) {
                        let m = Matrix::from_fn(g.rows(), pc, |r, c| g[(r, c0 + c)]);
                        acc(p, m)?;
                    }
                    c0 += pc;
                }
            }
            Op::Column(a, j) => {
                let av = self.val(*a);
                let mut m = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    m[(r, *j)] = g.data()[r];
                }
                acc(*a, m)?
            }
            Op::Broadcast(s) => acc(*s, Matrix::scalar(g.sum()))?,
            Op::Custom(op, inputs) => {
                let vals: Vec<&Matrix> = inputs.iter().map(|&k| self.val(k)).collect();
                let back = op.backward(&vals, out, g)?;
                if back.len() != inputs.len() {
                    return Err(Error::shape(op.name(), "backward returned the wrong number of gradients"));
                }
                for (&k, gk) in inputs.iter().zip(back) {
                    if let Some(gk) = gk {
                        if needs(k) {
                            acc(k, gk)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adjoint of `L = chol(A)`: given `L̄`, returns the symmetric `Ā`.
///
/// `Ā = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)` where `Φ` keeps the lower triangle and halves
/// the diagonal.
pub fn cholesky_adjoint(l: &Matrix, lbar: &Matrix) -> Result<Matrix> {
    let lbar = lbar.lower_triangle();
    let mut p = l.matmul_tn(&lbar)?.lower_triangle();
    for i in 0..p.rows() {
        p[(i, i)] *= 0.5;
    }
    // X = L⁻ᵀ P, then S = X L⁻¹, i.e. Sᵀ = L⁻ᵀ Xᵀ.
    let x = tri_solve(l, &p, TriSide::LowerTranspose)?;
    let st = tri_solve(l, &x.transpose(), TriSide::LowerTranspose)?;
    let n = st.rows();
    Ok(Matrix::from_fn(n, n, |i, j| 0.5 * (st[(i, j)] + st[(j, i)])))
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if any flowed to it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
