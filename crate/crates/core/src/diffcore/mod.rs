//! Dense `f64` tensors, a dynamic reverse-mode tape, and plain SGD.

mod graph;
mod params;
mod tensor;

pub use graph::{shuffle_index, Bound, Gradients, Graph, Primitive, Var};
pub(crate) use graph::log_sum_exp;
pub use params::{checkpoint_paths, ParamSet};
pub use tensor::DiffTensor;
