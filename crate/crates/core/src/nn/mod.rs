//! A small reverse-mode autodiff engine over dense f64 tensors, sized for the
//! graph networks in this crate.

pub mod graph;
pub mod losses;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use params::{Adam, ParamId, ParamStore};
pub use tensor::Tensor;
