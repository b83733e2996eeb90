//! Parameter ownership and binding of module weights onto a [`Graph`].

use std::collections::HashMap;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateKind {
    /// Trainable weight.
    Param,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

/// Anything that owns named tensors.
///
/// Visiting order must be stable: optimizers and serializers rely on it.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, StateKind));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, StateKind));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, k| {
            if k == StateKind::Param {
                n += t.numel();
            }
        });
        n
    }
}

/// Visit a child module under `prefix`.
pub fn visit_child(
    prefix: &str,
    child: &dyn Module,
    f: &mut dyn FnMut(&str, &Tensor, StateKind),
) {
    child.visit(&mut |name, t, k| f(&format!("{prefix}.{name}"), t, k));
}

pub fn visit_child_mut(
    prefix: &str,
    child: &mut dyn Module,
    f: &mut dyn FnMut(&str, &mut Tensor, StateKind),
) {
    child.visit_mut(&mut |name, t, k| f(&format!("{prefix}.{name}"), t, k));
}

/// Batch statistics observed during a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub(crate) key: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-forward binding context.
///
/// Parameters are looked up by address, so a tensor used twice within one
/// forward pass (shared weights) binds to a single graph variable and
/// receives the sum of both gradient contributions.
pub struct Ctx<'g> {
    graph: &'g Graph,
    trainable: bool,
    training: bool,
    bound: HashMap<usize, Var<'g>>,
    norm_stats: Vec<NormStats>,
}

pub(crate) fn addr(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

impl<'g> Ctx<'g> {
    /// Frozen weights, inference-mode normalization.
    pub fn frozen(graph: &'g Graph) -> Self {
        Self {
            graph,
            trainable: false,
            training: false,
            bound: HashMap::new(),
            norm_stats: Vec::new(),
        }
    }

    /// Trainable weights, batch-statistics normalization.
    pub fn training(graph: &'g Graph) -> Self {
        Self {
            trainable: true,
            training: true,
            ..Self::frozen(graph)
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn param(&mut self, t: &Tensor) -> Var<'g> {
        let key = addr(t);
        if let Some(v) = self.bound.get(&key) {
            return *v;
        }
        let v = if self.trainable {
            self.graph.leaf(t.clone())
        } else {
            self.graph.constant(t.clone())
        };
        self.bound.insert(key, v);
        v
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    pub(crate) fn record_norm_stats(&mut self, running_mean: &Tensor, mean: Vec<f64>, var: Vec<f64>) {
        self.norm_stats.push(NormStats {
            key: addr(running_mean),
            mean,
            var,
        });
    }

    pub fn take_norm_stats(&mut self) -> Vec<NormStats> {
        std::mem::take(&mut self.norm_stats)
    }

    /// Gradients of every parameter of `module`, in visiting order.
    /// Parameters that were not used in the forward pass get zeros.
    pub fn param_grads(&self, module: &dyn Module, grads: &Gradients) -> Vec<Tensor> {
        let mut out = Vec::new();
        module.visit(&mut |_, t, k| {
            if k != StateKind::Param {
                return;
            }
            let g = self
                .bound
                .get(&addr(t))
                .and_then(|v| grads.get(*v).cloned())
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            out.push(g);
        });
        out
    }

    /// Whether `t` was bound during this forward pass.
    pub fn is_bound(&self, t: &Tensor) -> bool {
        self.bound.contains_key(&addr(t))
    }
}

/// Fold recorded batch statistics into running estimates.
pub fn apply_norm_stats(module: &mut dyn Module, stats: &[NormStats], momentum: f64) {
    if stats.is_empty() {
        return;
    }
    // Running mean and variance are visited as consecutive buffers
    // `*.running_mean`, `*.running_var`.
    let mut pending: Option<Vec<&NormStats>> = None;
    module.visit_mut(&mut |name, t, kind| {
        if kind != StateKind::Buffer {
            return;
        }
        if name.ends_with("running_mean") {
            let key = addr(t);
            let hits: Vec<&NormStats> = stats.iter().filter(|s| s.key == key).collect();
            for s in &hits {
                for (r, m) in t.data_mut().iter_mut().zip(&s.mean) {
                    *r = (1.0 - momentum) * *r + momentum * m;
                }
            }
            pending = Some(hits);
        } else if name.ends_with("running_var") {
            if let Some(hits) = pending.take() {
                for s in hits {
                    for (r, v) in t.data_mut().iter_mut().zip(&s.var) {
                        *r = (1.0 - momentum) * *r + momentum * v;
                    }
                }
            }
        }
    });
}

/// Copy every named tensor of `module` into a list.
pub fn state_dict(module: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    module.visit(&mut |name, t, _| out.push((name.to_string(), t.clone())));
    out
}

/// Error from [`load_state_dict`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadError {
    Missing(String),
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
}

impl std::fmt::Display for LoadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoadError::Missing(n) => write!(f, "missing tensor `{n}`"),
            LoadError::Shape { name, expected, found } => {
                write!(f, "tensor `{name}` has shape {found:?}, expected {expected:?}")
            }
        }
    }
}

impl std::error::Error for LoadError {}

pub fn load_state_dict(module: &mut dyn Module, state: &[(String, Tensor)]) -> Result<(), LoadError> {
    let map: HashMap<&str, &Tensor> = state.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut err = None;
    module.visit_mut(&mut |name, t, _| {
        if err.is_some() {
            return;
        }
        match map.get(name) {
            None => err = Some(LoadError::Missing(name.to_string())),
            Some(src) if src.shape() != t.shape() => {
                err = Some(LoadError::Shape {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: src.shape().to_vec(),
                })
            }
            Some(src) => *t = (*src).clone(),
        }
    });
    err.map_or(Ok(()), Err)
}
