//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Node ids
//! increase monotonically, so walking ids backwards is a valid topological
//! order for [`Graph::backward`]. Nodes whose inputs are all constants carry
//! no backward closure.

mod nn;
mod ops;
mod vol;

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{Float, Tensor};

pub use nn::SteSpec;

pub(crate) struct BackwardCtx<'a, T> {
    pub inputs: Vec<Rc<Tensor<T>>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

impl<T> BackwardCtx<'_, T> {
    pub fn input(&self, i: usize) -> &Tensor<T> {
        &self.inputs[i]
    }
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf that shares storage with the caller.
    pub fn param(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_leaf(Rc::new(value), requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Rc::new(value), false)
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    pub(crate) fn op<F>(&self, parents: &[Var<'_, T>], value: Tensor<T>, backward: F) -> Var<'_, T>
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward() needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].value.clone())
                    .collect(),
                output: &node.value,
                grad: &grad,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence
    /// the loss.
    pub fn take_or_zeros(&mut self, var: Var<'_, T>) -> Tensor<T> {
        match self.grads.get_mut(var.id).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

impl<'g, T: Float> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> T {
        self.value().item()
    }
}
