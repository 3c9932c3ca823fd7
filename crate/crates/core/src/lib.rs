//! Numeric kernels for neighborhood attention with variadic per-head
//! receptive fields ("Hydra" heads), compact-transformer tokenizers and
//! pooling, attention density maps, and the Fréchet-Gaussian metric.
//!
//! All kernels run on [`tensor::Tensor`] in 32- or 64-bit precision and have
//! hand-written backward passes that are certified by [`gradcheck`].

pub mod attention;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nbhd;
pub mod rollout;
pub mod tensor;

pub use error::{Error, Result};
pub use nbhd::NeighborhoodSpec;
pub use tensor::{Scalar, Tensor};
