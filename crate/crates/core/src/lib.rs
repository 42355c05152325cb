//! Multi-scale selective state-space forecasting.
//!
//! The crate is layered bottom-up: [`tensor`] provides f64 tensors with
//! reverse-mode autodiff, [`ssm`] the discretized selective scan and the
//! Mamba block, [`multiscale`] the parallel multi-rate block ensemble,
//! [`model`] the full forecaster, [`data`] ingestion and windowing, and
//! [`train`] optimization and evaluation.

pub mod artifact;
pub mod data;
pub mod error;
pub mod init;
pub mod model;
pub mod multiscale;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
