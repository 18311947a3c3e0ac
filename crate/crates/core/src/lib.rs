//! Activation-steering laboratory on a from-scratch toy transformer: knowledge
//! probing, contrastive steering vectors, single-submodule amortized
//! training, evaluation metrics and compute accounting.

pub mod casal;
pub mod container;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod flops;
pub mod metrics;
pub mod model;
pub mod probe;
pub mod steer;
pub mod tensor;

pub use error::{CasalError, Result};
pub use tensor::Matrix;
