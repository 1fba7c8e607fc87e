//! Modulation classification with selective state-space layers and learned
//! soft-threshold denoising.
//!
//! The crate is generic over the floating-point element type through
//! [`Scalar`]; `f32` is used for training and benchmarks, `f64` for
//! verification. Concrete aliases for both precisions are exported below.

mod binio;
pub mod bench;
pub mod dataio;
pub mod error;
pub mod hippo;
pub mod model;
pub mod ndiff;
pub mod scalar;
pub mod shrink;
pub mod siggen;
pub mod sssm;
pub mod train;

pub use error::{Error, Result};
pub use model::{MamcaConfig, MamcaModel};
pub use scalar::Scalar;

pub type Tensor32 = ndiff::Tensor<f32>;
pub type Tensor64 = ndiff::Tensor<f64>;
pub type Model32 = model::MamcaModel<f32>;
pub type Model64 = model::MamcaModel<f64>;
