//! Named parameter storage and its binding onto a [`Graph`].

use crate::error::{AfError, Result};
use crate::numcore::graph::{Gradients, Graph, Var};
use crate::numcore::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered named tensors. The order is the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Replaces every tensor with the same-named one in `other`, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(AfError::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (name, value) in other.iter() {
            let id = self
                .find(name)
                .ok_or_else(|| AfError::Shape(format!("unexpected tensor {name}")))?;
            let (want, got) = (self.values[id.0].shape(), value.shape());
            if want != got {
                return Err(AfError::Shape(format!(
                    "tensor {name}: checkpoint {}x{}, model {}x{}",
                    got.0, got.1, want.0, want.1
                )));
            }
            self.values[id.0] = value.clone();
        }
        Ok(())
    }

    /// Places every tensor on `g`; those for which `trainable(name)` is false
    /// become constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(name, value)| {
                if trainable(name) {
                    g.param(value.clone())
                } else {
                    g.constant(value.clone())
                }
            })
            .collect();
        Binding { vars }
    }
}

/// Graph variables for each entry of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient for `id`, zeros when none reached it.
    pub fn gradient(&self, grads: &Gradients, g: &Graph, id: ParamId) -> Matrix {
        let var = self.vars[id.0];
        grads.get(var).cloned().unwrap_or_else(|| {
            let (r, c) = g.value(var).shape();
            Matrix::zeros(r, c)
        })
    }
}
