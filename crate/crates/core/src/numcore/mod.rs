//! Dense tensors, a recorded-tape autodiff engine, parameter storage and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use gradcheck::{grad_check, CoordinateCheck, GradCheckOptions, GradCheckReport};
pub use graph::{Grads, Graph, Var};
pub use params::{ParamStore, Session};
pub use tensor::{Real, Tensor};
