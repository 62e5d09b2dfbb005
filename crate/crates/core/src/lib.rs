//! Adversarial-robustness workbench: a small reverse-mode autodiff engine,
//! MNIST-scale classifiers, L-infinity attacks, and the adversarial / logit
//! pairing / logit squeezing training defenses.

// `!(x >= 0.0)` is how NaN gets rejected alongside negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
