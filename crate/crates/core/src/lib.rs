//! Cross-lingual self-training for span-based named entity recognition with
//! contrastive span representations and prototype-based pseudo-label
//! refinement.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod math;
pub mod objectives;
pub mod prototypes;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the training pipeline.
pub type Real = f64;

pub type Tensor64 = math::Tensor<f64>;
pub type Tensor32 = math::Tensor<f32>;
pub type Tape64 = math::Tape<f64>;
pub type Tape32 = math::Tape<f32>;
