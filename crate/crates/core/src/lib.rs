//! Channel pruning by re-parameterization: compactor layers are trained with
//! a penalty gradient on selected channels, then merged and sliced away so
//! the pruned model computes the same function as the trained one.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod models;
pub mod optim;
pub mod reparam;
pub mod report;
pub mod resrep;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{ModelGraph, Target};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor4;
