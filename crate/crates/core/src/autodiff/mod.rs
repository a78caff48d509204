//! Minimal tensor engine: reverse-mode gradients, forward-mode JVPs and
//! stop-gradient.

mod graph;
mod params;
mod tensor;

pub use graph::{jvp, Gradients, Graph, Var};
pub use params::ParameterSet;
pub use tensor::Tensor;
