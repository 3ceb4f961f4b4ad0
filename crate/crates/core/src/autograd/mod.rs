//! Minimal reverse-mode differentiation over volumetric `f32` tensors.

mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, Spread};
pub use kernels::ConvGeom;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
