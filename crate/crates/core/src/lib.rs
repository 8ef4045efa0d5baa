//! Universal pooling: a trainable, channel-wise, block-local attention
//! pooling operator for convolutional networks, together with the small
//! reverse-mode autodiff engine, baseline poolings, CIFAR-scale models,
//! training loop and analysis tooling needed to study it.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod param;
pub mod pooling;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use param::{sgd_step, ParamId, ParamStore, Parameter};
pub use scalar::{Precision, Real};
pub use tensor::Tensor;
