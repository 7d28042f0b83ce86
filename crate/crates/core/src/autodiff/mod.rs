//! Minimal dense reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{check_params, finite_diff_check};
pub use graph::{Axis, Gradients, Graph, NodeId, LOG_FLOOR, NORM_FLOOR};
pub use params::Params;
pub use tensor::Tensor;

pub(crate) use params::ByteReader;
