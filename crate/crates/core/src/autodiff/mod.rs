//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every [`Tensor`] operation whose inputs live on a [`Tape`] is recorded.
//! [`backward`] walks the tape in reverse; with `retain_graph` the walk is
//! itself recorded, which is how Hessian-vector products are obtained.

mod kernels;
mod params;
mod second_order;
mod tape;
mod tensor;

pub use params::{flatten_tensors, split_flat, ModelParams, NamedTensor, ParamSet};
pub use second_order::{hvp, mixed_hvp, BilevelObjective, CurvatureProbe, Objective};
pub use tape::{backward, vjp_many, Tape};
pub use tensor::{precision, with_precision, Precision, Tensor};

pub(crate) use tensor::sigmoid;
