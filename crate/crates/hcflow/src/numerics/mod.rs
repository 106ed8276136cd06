//! Minimal differentiable tensor core: rank-4 tensors, structured kernels,
//! a reverse-mode autodiff graph, parameter storage, and Adam.

pub mod adam;
pub mod graph;
pub mod kernels;
pub mod linalg;
pub mod params;
pub mod real;
pub mod rng;
pub mod tensor;

pub use adam::AdamState;
pub use graph::{Grads, Graph, Var};
pub use params::{ParamId, ParamStore, PassCtx};
pub use real::Real;
pub use rng::SplitMix64;
pub use tensor::{Shape4, Tensor, Tensor4};
