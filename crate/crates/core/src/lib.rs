//! Cross-domain fault diagnosis with an ARMA graph-convolutional teacher,
//! class-conditional squared-kernel discrepancy, and progressive
//! distillation into a compact convolutional student.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discrepancy;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod linalg;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
