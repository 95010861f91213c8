//! Joint multimodal transformer fusion for continuous affect prediction.

pub mod backbones;
pub mod codec;
pub mod data;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use seed::Seed;
pub use tensor::Tensor;
