//! Dense `f64` tensors, a reverse-mode tape, seeded randomness, and the
//! finite-difference gradient oracle the rest of the crate is checked against.

mod fdiff;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use fdiff::finite_diff_grad;
pub use graph::{Function, Gradients, Graph, Var};
pub use ops::LAYER_NORM_EPS;
pub use optim::{Adam, AdamConfig, GradMap};
pub use params::{BoundParams, ParamSet};
pub use rng::Rng;
pub use tensor::Tensor;
