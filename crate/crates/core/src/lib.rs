//! Feature evolution through fine-tuning and model merging.
//!
//! The crate trains small one-layer transformer language models, fine-tunes
//! and spherically interpolates them, extracts features with sparse
//! autoencoders on the MLP hidden activations, and classifies each feature
//! as persisting, emerging or disappearing across a parent/child model pair.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command-line pipeline (`f32`) and by
//! the gradient and oracle checks (`f64`).

// `!(x > 0.0)` is the NaN-rejecting form throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autointerp;
pub mod corpus;
pub mod error;
pub mod flow;
pub mod lm;
pub mod merge;
pub mod params;
pub mod persist;
pub mod proxy;
pub mod report;
pub mod sae;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type LmParams32 = lm::LmParams<f32>;
pub type LmParams64 = lm::LmParams<f64>;
pub type SaeParams32 = sae::SaeParams<f32>;
pub type SaeParams64 = sae::SaeParams<f64>;
pub type ActivationMatrix32 = flow::ActivationMatrix<f32>;
pub type ActivationMatrix64 = flow::ActivationMatrix<f64>;
pub type FlatParams32 = merge::FlatParams<f32>;
pub type FlatParams64 = merge::FlatParams<f64>;
