//! Reconstruction-based anomaly detection with an explicit latent bottleneck.
//!
//! The crate bundles a small f64 autodiff engine, the convolutional
//! autoencoder family used for the experiments, a synthetic phantom
//! generator, evaluation metrics, and exact information-theoretic checks of
//! the bottleneck arguments.

pub mod error;
pub mod harness;
pub mod info;
pub mod metrics;
pub mod models;
pub mod prop1;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
