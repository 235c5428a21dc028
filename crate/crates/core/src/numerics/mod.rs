//! Dense `f64` tensors, tape-based reverse-mode differentiation, parameter
//! storage with Adam, and a finite-difference gradient checker.

mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_subset, relative_error, GradCheckOptions, GradCheckReport};
pub use params::{AdamConfig, ParameterStore};
pub use rng::Rng;
pub use tape::{Conv1dGeom, Conv2dGeom, Tape, Var};
pub use tensor::Tensor;
