//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order. [`Graph::backward`] walks the tape in reverse and accumulates the
//! gradient of a scalar output into every node that requires one. Leaves
//! created with `requires_grad = false` (inputs, frozen parameters) never
//! receive a gradient, and neither does anything computed only from them.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
///
/// `inputs` are the parent values in the order they were recorded. The
/// returned vector has one entry per parent; `None` means no gradient flows
/// into that parent.
pub trait Function {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    func: Option<Box<dyn Function>>,
    requires_grad: bool,
    label: Option<String>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            func: None,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf carrying a name, used for parameters so that the recorded
    /// graph can be inspected afterwards.
    pub fn named_leaf(&mut self, name: &str, value: Tensor, requires_grad: bool) -> Var {
        let v = self.leaf(value, requires_grad);
        self.nodes[v.0].label = Some(name.to_string());
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records the result of an operation on `parents`.
    pub fn record(&mut self, value: Tensor, parents: &[Var], func: Box<dyn Function>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            func: Some(func),
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of every recorded operation, in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter_map(|n| n.func.as_ref().map(|f| f.name()))
            .collect()
    }

    /// Labels of every named leaf, in tape order.
    pub fn leaf_labels(&self) -> Vec<&str> {
        self.nodes.iter().filter_map(|n| n.label.as_deref()).collect()
    }

    /// Back-propagates from a scalar output with unit seed.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.nodes[output.0].value.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: shape.to_vec(),
                rhs: vec![1],
            });
        }
        self.backward_with(output, Tensor::full(shape, 1.0))
    }

    /// Back-propagates an explicit upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.nodes[output.0].value.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward_with",
                lhs: seed.shape().to_vec(),
                rhs: self.nodes[output.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(func) = node.func.as_ref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = func.backward(&inputs, &node.value, &g);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", func.name());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "{}", func.name());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Accumulated gradients, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
