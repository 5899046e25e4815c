//! Desk-scale federated learning simulator for semantic segmentation.
//!
//! The pipeline trains a small encoder-decoder segmentation net with FedAvg,
//! isolates latent sample domains by clustering class-wise gradients through a
//! federated Gaussian mixture plus spectral clustering, refines one model per
//! cluster, and dispatches test images with a lightweight domain classifier.
//! Everything is deterministic given a root seed, for any thread count.

pub mod config;
pub mod data;
pub mod error;
pub mod ddi;
pub mod fed;
pub mod gmm;
pub mod metrics;
pub mod scfl;
pub mod spectral;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod tensor;

pub mod nn;

pub use error::{Error, Result};

/// Scalar type the pipeline runs on. The math core is generic over
/// [`scalar::Scalar`]; these aliases pin the shipped configuration.
pub type Real = f64;

pub type Tensor64 = tensor::Tensor<Real>;
pub type ModelParams64 = nn::ModelParams<Real>;
pub type GradVector64 = nn::GradVector<Real>;
