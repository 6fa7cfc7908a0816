//! Minimal reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Graph`] is a define-by-run tape: each op evaluates immediately and
//! caches its output, and [`Graph::backward`] walks the tape in reverse with
//! a fixed accumulation order, so gradients are bitwise reproducible.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamHandles, ParamStore};
pub use tensor::{Real, Tensor};
