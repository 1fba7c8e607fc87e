//! Dense tensors, a reverse-mode tape and the Adam optimizer.
//!
//! Values are evaluated eagerly as ops are appended to a [`Graph`]; a call
//! to [`Graph::backward`] then visits the recorded ops in reverse. Learnable
//! tensors live in a [`ParamStore`] and enter a graph through
//! [`Graph::param`], so one store can serve any number of graphs.

mod adam;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub(crate) use graph::softplus;
pub use graph::{Binary, Function, Graph, ReduceKind, Unary, Var};
pub use kernels::Padding;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
