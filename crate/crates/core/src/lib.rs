//! Federated segmentation workbench: a small autodiff engine, an attention
//! U-Net, synthetic data, corruption models, federated/centralised/local
//! training, anomaly detection, segmentation metrics and paired statistics.

pub mod anomaly;
pub mod corruption;
pub mod data;
pub mod error;
pub mod federation;
pub mod image;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runtime;
pub mod scalar;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type UNet64 = model::AttentionUNet<f64>;
pub type UNet32 = model::AttentionUNet<f32>;
