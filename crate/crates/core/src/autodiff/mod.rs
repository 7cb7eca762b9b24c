//! Reverse-mode differentiation and finite-difference gradient checks.

mod gradcheck;
mod graph;

pub use gradcheck::{
    gradcheck, relative_error, GradCheckConfig, GradReport, ParamReport, DEFAULT_STEP,
};
pub use graph::{Activation, Gradients, Graph, NodeId};
