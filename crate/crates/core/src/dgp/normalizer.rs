use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::numerics::Matrix;

/// Decay of the running min/max in train mode.
pub const EMA_DECAY: f64 = 0.99;
const DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Running statistics update from each batch.
    Train,
    /// Statistics are frozen and out-of-range values clamp to `[0, 1]`.
    Eval,
}

/// Per-dimension affine map of layer activations into `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerState {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Fixed statistics never update (the data layer).
    pub fixed: bool,
    pub initialized: bool,
    /// Values clamped in eval mode so far.
    #[serde(default)]
    pub clamped: u64,
}

impl NormalizerState {
    /// Identity on `[0, 1]`, for inputs that are already normalized.
    pub fn unit(dims: usize) -> Self {
        NormalizerState { min: vec![0.0; dims], max: vec![1.0; dims], fixed: true, initialized: true, clamped: 0 }
    }

    /// Statistics set by the first training batch.
    pub fn running(dims: usize) -> Self {
        NormalizerState { min: vec![0.0; dims], max: vec![1.0; dims], fixed: false, initialized: false, clamped: 0 }
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    /// Folds a batch's min/max into the running statistics as an exponential
    /// moving average. A single outlying batch moves them by only
    /// `1 − EMA_DECAY` of its excess; whatever falls outside is clamped.
    pub fn update(&mut self, f: &Matrix) {
        if self.fixed || f.rows() == 0 {
            return;
        }
        for d in 0..self.dims() {
            let col = f.column(d);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if self.initialized {
                self.min[d] = EMA_DECAY * self.min[d] + (1.0 - EMA_DECAY) * lo;
                self.max[d] = EMA_DECAY * self.max[d] + (1.0 - EMA_DECAY) * hi;
            } else {
                self.min[d] = lo;
                self.max[d] = hi;
            }
        }
        self.initialized = true;
    }

    /// Per-dimension `(scale, shift)` with `h = f · scale + shift`.
    fn affine(&self) -> Vec<(f64, f64)> {
        self.min
            .iter()
            .zip(&self.max)
            .map(|(lo, hi)| {
                let range = hi - lo;
                if range <= DEGENERATE_RANGE {
                    (0.0, 0.5)
                } else {
                    (1.0 / range, -lo / range)
                }
            })
            .collect()
    }

    fn count_clamped(&mut self, h: &Matrix) {
        self.clamped += h.data().iter().filter(|v| **v < 0.0 || **v > 1.0).count() as u64;
    }

    /// Normalizes plain values.
    pub fn apply(&mut self, f: &Matrix, mode: Mode) -> Matrix {
        if mode == Mode::Train {
            self.update(f);
        }
        let affine = self.affine();
        let h = Matrix::from_fn(f.rows(), f.cols(), |i, d| f[(i, d)] * affine[d].0 + affine[d].1);
        if mode == Mode::Eval {
            self.count_clamped(&h);
        }
        h.map(|v| v.clamp(0.0, 1.0))
    }

    /// Normalizes a tape node. The statistics are treated as constants.
    pub fn apply_on_tape(&mut self, tape: &mut Tape, f: Var, mode: Mode) -> Result<Var> {
        if mode == Mode::Train {
            self.update(tape.value(f));
        }
        let affine = self.affine();
        let (rows, cols) = tape.value(f).shape();
        if mode == Mode::Eval {
            let v = tape.value(f);
            let h = Matrix::from_fn(rows, cols, |i, d| v[(i, d)] * affine[d].0 + affine[d].1);
            self.count_clamped(&h);
        }
        let scale = tape.constant(Matrix::from_fn(rows, cols, |_, d| affine[d].0));
        let shift = tape.constant(Matrix::row_vector(affine.iter().map(|a| a.1).collect()));
        let h = tape.mul(f, scale)?;
        let h = tape.add_row(h, shift)?;
        // Clamp into [0, 1]; clamped entries get no gradient.
        let h = tape.clamp_min(h, 0.0);
        let neg = tape.scale(h, -1.0);
        let neg = tape.clamp_min(neg, -1.0);
        Ok(tape.scale(neg, -1.0))
    }
}

/// Normalizes plain values through `state`.
pub fn normalize(state: &mut NormalizerState, f: &Matrix, mode: Mode) -> Matrix {
    state.apply(f, mode)
}
