use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::diff::tape::{Tape, Var};
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.shared(name).map(|t| &**t)
    }

    pub fn shared(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k, &**v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k, Arc::make_mut(v)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Hard copy of every tensor in `src`; shapes must match.
    pub fn copy_from(&mut self, src: &ParamStore) -> Result<()> {
        for (name, value) in &src.tensors {
            let dst =
                self.tensors.get_mut(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if dst.shape() != value.shape() {
                return Err(Error::shape("copy_from", format!("`{name}`: {:?} vs {:?}", dst.shape(), value.shape())));
            }
            *dst = value.clone();
        }
        Ok(())
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, value) in &self.tensors {
            let theirs = other.get(name)?;
            if theirs.shape() != value.shape() {
                return Err(Error::shape(
                    name.clone(),
                    format!("expected {:?}, found {:?}", value.shape(), theirs.shape()),
                ));
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(Tensor::zeros(v.shape().to_vec()))))
                .collect(),
        }
    }

    /// Push every tensor onto a tape as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self.tensors.iter().map(|(k, v)| (k.clone(), tape.shared(v.clone(), trainable))).collect();
        BoundParams { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Glorot-uniform matrix. The last row is zeroed when `bias_row` is set, for
/// weight matrices that consume a trailing constant-1 input column.
pub fn glorot(rows: usize, cols: usize, bias_row: bool, rng: &mut impl Rng) -> Tensor {
    let fan_in = if bias_row { rows - 1 } else { rows };
    let limit = (6.0 / (fan_in + cols) as f64).sqrt();
    let mut data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    if bias_row {
        for v in &mut data[(rows - 1) * cols..] {
            *v = 0.0;
        }
    }
    Tensor::from_parts(vec![rows, cols], data)
}
