use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::tape::{Tape, Var};

/// Named trainable tensors. Positive quantities are stored as logs.
///
/// Slot order is insertion order and is stable across clones, so two sets
/// built the same way can be combined slot by slot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    slots: IndexMap<String, Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.slots.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.slots.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.slots.get_mut(name)
    }

    /// Like [`ParamSet::get`] but an unknown slot is an error.
    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name).ok_or_else(|| Error::Invalid(format!("unknown parameter slot `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(Matrix::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.slots.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet { slots: self.slots.iter().map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols()))).collect() }
    }

    /// Errors unless `other` has the same slots, in order, with equal shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.slots.len() != other.slots.len() {
            return Err(Error::shape("params", format!("{} slots vs {}", self.slots.len(), other.slots.len())));
        }
        for ((ka, va), (kb, vb)) in self.slots.iter().zip(&other.slots) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::shape(
                    "params",
                    format!("slot `{ka}` {:?} vs `{kb}` {:?}", va.shape(), vb.shape()),
                ));
            }
        }
        Ok(())
    }

    /// `self += c * other`, slot by slot.
    pub fn add_scaled(&mut self, other: &ParamSet, c: f64) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.slots.values_mut().zip(other.slots.values()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += c * y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.slots.values().all(Matrix::is_finite)
    }

    /// Registers every slot as a tape leaf; `track` selects params or constants.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bindings {
        let vars = self
            .slots
            .iter()
            .map(|(k, v)| {
                let var = if track { tape.param(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bindings { vars }
    }
}

/// Tape handles for each slot of a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Invalid(format!("unknown parameter slot `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
