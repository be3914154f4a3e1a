//! Masked spectrogram prediction: log-mel frontend, patch masking, an
//! asymmetric transformer encoder–decoder trained to reconstruct masked
//! patches, and supervised finetuning of the encoder.
//!
//! Numerics are generic over [`Scalar`] (`f32` or `f64`).

pub mod cli;
pub mod error;
pub mod finetune;
pub mod frontend;
pub mod io;
pub mod metrics;
pub mod model;
pub mod patch;
pub mod pretrain;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Frontend32 = frontend::Frontend<f32>;
pub type Frontend64 = frontend::Frontend<f64>;
