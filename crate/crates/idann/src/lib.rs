//! Incremental unsupervised domain-adversarial training (iDANN).
//!
//! The crate provides a small double-precision neural core (convolution,
//! pooling, dense layers, manual backpropagation, SGD with momentum), a
//! three-block domain-adversarial model with a gradient reversal layer,
//! the incremental pseudo-labeling loop with two selection policies
//! (confidence ranking and unanimous-kNN filtering), label-smoothed final
//! retraining, and a configuration-driven experiment runner.

pub mod config;
pub mod data;
pub mod error;
pub mod idann;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod selection;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
