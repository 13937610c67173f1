pub mod attention;
pub mod config;
pub mod dataset;
pub mod degrade;
pub mod diagnostics;
pub mod dgdm;
pub mod encoder;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod pmm;
pub mod scalar;
pub mod schedule;
pub mod unfolder;

pub use error::{Error, Result};
pub use image::Image;
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Restorer32 = unfolder::Restorer<f32>;
pub type Restorer64 = unfolder::Restorer<f64>;
pub type Encoder32 = encoder::ToyEncoder<f32>;
pub type Encoder64 = encoder::ToyEncoder<f64>;
