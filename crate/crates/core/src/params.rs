//! Named parameter storage shared by every model.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Rc<Tensor<T>>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(Rc::new(value));
        ParamId(self.tensors.len() - 1)
    }

    /// `N(0, std^2)` initialization; draws are made in `f32` so that an
    /// `f64` model built from the same seed is an exact upcast.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let dist = Normal::new(0.0f32, std as f32).unwrap();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(rng) as f64)).collect();
        self.add(name, Tensor::from_vec(shape, data).unwrap())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.tensors[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter in `graph`, as differentiable leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| {
                    if trainable {
                        graph.param(t.clone())
                    } else {
                        graph.constant_rc(t.clone())
                    }
                })
                .collect(),
        }
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("unknown parameter {name}")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "{name}: shape {:?} vs {:?}",
                self.tensors[i].shape(),
                value.shape()
            )));
        }
        self.tensors[i] = Rc::new(value);
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Rc::new(t.cast())).collect(),
        }
    }

    /// Exact equality of every value.
    pub fn bit_equal(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| {
                    a.shape() == b.shape()
                        && a.data().iter().zip(b.data()).all(|(x, y)| x.bits() == y.bits())
                })
    }
}

/// Parameters registered in one graph, indexed by [`ParamId`].
pub struct Bound<'g, T> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Float> Bound<'g, T> {
    pub fn get(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    /// Gradients in parameter order, zeros for parameters the loss did not
    /// reach.
    pub fn grads(&self, grads: &mut Grads<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.take_or_zeros(v)).collect()
    }
}

impl<'g, T: Float> std::ops::Index<ParamId> for Bound<'g, T> {
    type Output = Var<'g, T>;
    fn index(&self, id: ParamId) -> &Var<'g, T> {
        &self.vars[id.0]
    }
}

/// Elementwise sum of two gradient lists.
pub fn add_grads<T: Float>(acc: &mut [Tensor<T>], more: &[Tensor<T>]) {
    for (a, b) in acc.iter_mut().zip(more) {
        a.add_assign(b);
    }
}
