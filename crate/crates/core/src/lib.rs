//! Joint training of a small image classifier and its data-augmentation
//! policy. Policy gradients come from the implicit function theorem, with the
//! inverse Hessian replaced by a truncated Neumann series of Hessian-vector
//! products.

pub mod augment;
pub mod cli;
pub mod data;
pub mod autodiff;
pub mod error;
pub mod hypergrad;
pub mod models;
pub mod optim;
pub mod policy;
pub mod trainloop;

pub use autodiff::{backward, ModelParams, ParamSet, Precision, Tape, Tensor};
pub use error::{Error, Result};
