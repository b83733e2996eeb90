//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Everything runs single-threaded with a fixed reduction order, so two
//! evaluations of the same graph on the same inputs are bit-identical.

pub mod gradcheck;
mod graph;
pub mod linalg;
pub mod module;
pub mod nn;
pub mod ops;
pub mod optim;
mod tensor;

pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use module::{Ctx, Module, StateKind};
pub use ops::basic::{add_all, concat, log_cosh};
pub use tensor::{numel, ShapeMismatch, Tensor};
