//! Reverse-mode differentiation over dense row-major `f64` tensors.
//!
//! The [`Graph`] records each operation with its forward value; a single
//! reverse sweep produces adjoints for every leaf created with
//! [`Graph::variable`]. [`ParamStore`] holds named model parameters,
//! [`Sgd`] updates them, [`checkpoint`] persists them and [`gradcheck`]
//! compares adjoints with finite differences.

pub mod checkpoint;
mod error;
mod graph;
pub mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{sigmoid, softplus, Graph, Var};
pub use optim::{Sgd, SgdConfig, StepOutcome};
pub use params::{Bound, Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
