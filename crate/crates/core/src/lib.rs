//! Desk-scale adversarial-robustness laboratory built around a selective
//! convolution preprocessing defense.
//!
//! The pipeline: a fixed edge-extraction filter produces an edge-strength
//! map, a steep sigmoid thresholds it into a soft binary mask, and the mask
//! multiplies the input image channel-wise before it reaches a small CNN.
//! The whole composition stays differentiable, so gradient attacks (FGSM,
//! JSMA) see through the defense rather than being masked, and a
//! decision-only boundary attack probes it through labels alone.
//!
//! The numeric core ([`tensor`], [`ssc`]) is generic over the scalar type
//! via [`num::Scalar`]; the training and evaluation pipeline uses the f64
//! aliases exported below.

pub mod attack;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod num;
pub mod ssc;
pub mod tensor;

pub use error::{Error, Result};

/// Scalar type used by the training/attack pipeline. Gradient verification
/// against central finite differences at 1e-4 relative tolerance needs the
/// full 64-bit mantissa.
pub type Real = f64;

pub type Tensor = tensor::Tensor<Real>;
pub type Kernel = tensor::Kernel<Real>;
pub type Graph = tensor::Graph<Real>;
