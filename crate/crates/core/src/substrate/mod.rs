//! Minimal differentiable-computation layer: dense `f64` arrays, a
//! reverse-mode tape, a named parameter store with Adam, and a
//! finite-difference gradient checker.

pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, op_suite, GradCheckConfig, GradCheckReport, OpCheck};
pub use graph::{Gradients, Graph, Var, MASK_BIAS, PROB_FLOOR};
pub use params::{AdamConfig, Checkpoint, ParamId, ParamRecord, ParamStore, TensorValue, CHECKPOINT_FORMAT_VERSION};
pub use tensor::Tensor;
