//! Triple point masking: multi-mask self-supervised pre-training for point
//! cloud masked autoencoders, with SVM-guided checkpoint selection.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod masking;
pub mod probe;
pub mod model;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
