//! Low-rank adaptation of a vision transformer for multi-label coral reef
//! tile classification.

pub mod attribution;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod head;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
