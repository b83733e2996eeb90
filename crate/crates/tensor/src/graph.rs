//! Define-by-run tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! a backward closure. [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every leaf that was created with [`Graph::leaf`].
//! Nodes are appended in topological order, so a single reverse sweep is
//! enough.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::tensor::Tensor;

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a> {
    /// Gradient of the root with respect to this node's output.
    pub grad: &'a Tensor,
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    /// `needs[i]` is false when input `i` does not lead to any leaf.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), true, None)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), false, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var { graph: self, id }
    }

    /// Record an operation. `forward` sees the input values; `backward`
    /// maps the output gradient onto input gradients.
    pub fn op<'g>(
        &'g self,
        inputs: &[Var<'g>],
        forward: impl FnOnce(&[&Tensor]) -> Tensor,
        backward: BackwardFn,
    ) -> Var<'g> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs
                .iter()
                .map(|v| {
                    debug_assert!(std::ptr::eq(v.graph, self), "var from another graph");
                    &nodes[v.id].value
                })
                .collect();
            let rg = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (forward(&vals), rg)
        };
        self.push(
            value,
            inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            Some(backward),
        )
    }

    pub fn value(&self, v: Var<'_>) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    pub fn requires_grad(&self, v: Var<'_>) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        assert_eq!(
            root_node.value.numel(),
            1,
            "backward from non-scalar of shape {:?}",
            root_node.value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.id + 1);
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(Tensor::full(root_node.value.shape().to_vec(), 1.0));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if node.parents.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let out = backward(&BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            debug_assert_eq!(out.len(), node.parents.len());
            for ((&p, g), &need) in node.parents.iter().zip(out).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_scaled(&g, 1.0),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        self.graph.value(*self)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_input_accumulates() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, -2.0]));
        // y = sum(x * x) + sum(x)
        let y = x.mul(x).sum().add(x.sum());
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Tensor::new(vec![1], vec![4.0]));
        let x = g.leaf(Tensor::new(vec![1], vec![2.0]));
        let y = x.mul(c).sum();
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
    }
}
