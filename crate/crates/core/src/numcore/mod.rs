//! Dense `f64` matrices with reverse-mode differentiation.

pub mod graph;
pub mod matrix;
pub mod params;

pub use graph::{Gradients, Graph, Var};
pub use matrix::Matrix;
pub use params::{Binding, ParamId, ParamStore};

#[cfg(test)]
pub(crate) mod fd;
