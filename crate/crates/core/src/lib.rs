//! Test-time adaptation of frame-wise video classifiers.
//!
//! A small residual CNN classifies each frame of a video independently. At
//! test time the batch-norm affine parameters are fine-tuned so the model's
//! own logit trajectory moves toward a median-filtered copy of itself, which
//! suppresses frame-to-frame flicker. The crate also carries the LDAM
//! pretraining loss, an entropy-minimization (TENT) baseline, a synthetic
//! domain-shift benchmark and a finite-difference gradient checker.

pub mod adapt;
pub mod autodiff;
pub mod benchmark;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod temporal;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
