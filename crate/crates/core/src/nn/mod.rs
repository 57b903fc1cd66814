//! Minimal CPU neural-network toolkit: autodiff graph, convolution kernel,
//! parameter sets and the Adam optimizer.

pub mod adam;
pub mod conv;
pub mod graph;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Tensor, Var};
pub use params::{Bound, ParamSet};
