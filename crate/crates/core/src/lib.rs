//! Dynamic vector quantization of multivariate time series.
//!
//! Two-stage pipeline over dense frame sequences:
//!
//! 1. A dynamic VQ-VAE ([`dvqvae`]) encodes a `[T × d]` sequence into a
//!    variable-length stream of `(code, duration)` pairs, spending codes
//!    where the per-frame information weight says the content changes.
//! 2. A causal code-stream generator ([`gpt`]) predicts code streams and
//!    their durations from a conditioning token sequence.
//!
//! Everything numeric is generic over the [`scalar::Scalar`] element
//! type; the aliases below pin the two precisions in common use.

pub mod autodiff;
pub mod checkpoint;
pub mod dvqvae;
pub mod error;
pub mod format;
pub mod gpt;
pub mod metrics;
pub mod optim;
pub mod quantizer;
pub mod rot6d;
pub mod sampler;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Codebook32 = quantizer::Codebook<f32>;
pub type Codebook64 = quantizer::Codebook<f64>;
pub type DvqVae32 = dvqvae::DvqVae<f32>;
pub type DvqVae64 = dvqvae::DvqVae<f64>;
pub type CodeGpt32 = gpt::CodeGpt<f32>;
pub type CodeGpt64 = gpt::CodeGpt<f64>;
