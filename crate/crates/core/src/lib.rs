//! Localized generative adversarial nets at desk scale.
//!
//! Local generators `G(x, z) = x + B(x, z) - B(x, 0)` produce a coordinate
//! chart around every data point. Their Jacobians in `z` give tangent bases,
//! which feed a locality/orthonormality regularizer, manifold gradients, a
//! Laplace-Beltrami estimate and a locally consistent semi-supervised
//! classifier.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod manifold;
pub mod metrics;
pub mod nets;
pub mod report;
pub mod semisup;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use nets::{Activation, DenseLayer, Mlp, MlpSpec, ParamMap};
pub use tensor::Tensor;
