//! Dense tensors, reverse-mode differentiation, optimization and seeded randomness.

mod attention;
mod gradcheck;
mod graph;
mod optim;
mod rng;
mod tensor;

pub use attention::{attend, AttnShape, Mask};
pub use gradcheck::{analytic_grads, analytic_grads_as, gradcheck, GradcheckConfig, GradcheckReport, Objective, ParamCheck};
pub use graph::{Graph, Var};
pub use optim::{clip_global_norm, global_norm, Adam, AdamConfig};
pub use rng::{Rng, RngState, RNG_ALGORITHM};
pub use tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("axis {axis} is invalid for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("{op} over an empty axis")]
    EmptyAxis { op: &'static str },
    #[error("index {index} out of range in {op} (limit {limit})")]
    IndexOutOfRange { op: &'static str, index: usize, limit: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Invalid(String),
}
