//! Spatially modulated co-attention for set-prediction object detection.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod dump;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod harness;
mod kernels;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nn;
pub mod optim;
pub mod prior;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Graph, Var};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
