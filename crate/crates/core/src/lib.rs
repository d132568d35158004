//! Selective aggregation over ViT tokens: inference, attention-flow metrics,
//! aggregation heads, linear probing, localization scoring and tensor IO.

pub mod aggregation;
pub mod localization;
pub mod metrics;
pub mod probe;
pub mod rng;
pub mod storage;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use rng::RngStream;
pub use tensor::{DenseTensor, Real, Tensor, TensorError};
