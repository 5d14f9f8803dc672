//! Key-Value Means attention with a small autodiff engine, a GPT-style
//! backbone, toy training and synthetic long-context tasks.

pub mod backbone;
pub mod checks;
pub mod data;
pub mod error;
pub mod kvm;
pub mod numerics;
pub mod oracle;
pub mod scalar;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Model64 = backbone::GptAlpha<f64>;
pub type Model32 = backbone::GptAlpha<f32>;
