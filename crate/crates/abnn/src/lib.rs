//! Adaptive batch-normalization networks for adversarial robustness.

pub mod attack;
pub mod config;
pub mod data;
pub mod experiment;
pub mod net;
pub mod report;
pub mod norm;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, Parameter, Tensor, TensorError, Var};
