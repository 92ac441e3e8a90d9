//! Scribe verification via deep metric learning.
//!
//! The crate trains Siamese and Triplet embedding networks (a depthwise-separable
//! mini CNN and a ViT-lite attention backbone) on folders of handwriting images,
//! then decides whether two images share a scribe by thresholding the Euclidean
//! distance between their 10-dimensional embeddings. Evaluation covers ROC/AUC,
//! accuracy, FAR and FRR over a fixed test-pair protocol.
//!
//! All numeric code is generic over the scalar type (`f32` for training, `f64`
//! for gradient verification); concrete aliases live at the crate root.

pub mod backbones;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Gradient-check precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// Training-precision tape.
pub type Tape32 = tensor::Tape<f32>;
/// Gradient-check precision tape.
pub type Tape64 = tensor::Tape<f64>;
/// Training-precision embedding network.
pub type Net32 = backbones::EmbeddingNet<f32>;
/// Gradient-check precision embedding network.
pub type Net64 = backbones::EmbeddingNet<f64>;
