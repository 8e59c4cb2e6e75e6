//! Video summarization engine: a small reverse-mode tensor engine, a 3D U-Net
//! frame scorer trained with REINFORCE, kernel temporal segmentation and
//! knapsack shot selection, plus the F1 evaluation harness.

// `!(x >= 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod rl;
pub mod shots;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
