//! Small f64 reverse-mode autodiff over `ndarray`, sized for desk-scale
//! vision models: dense ops, im2col convolutions, interpolation and
//! scatter primitives, named parameters, AdamW, and a finite-difference
//! gradient checker. Single-threaded by design so repeated runs are
//! bit-identical.

pub mod check;
pub mod graph;
pub mod linalg;
pub mod ops;
pub mod optim;
pub mod param;
pub mod sample;

pub use graph::{GradFn, Gradients, Graph, Tensor};
pub use param::{ParamStore, Session};
