//! Denoising masked autoencoder pre-training and Gaussian
//! randomized-smoothing certification, end to end on the CPU.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`numerics`]: Gaussian CDF/quantile, Clopper-Pearson bounds, exact
//!   binomial tests, seeded Gaussian sampling.
//! - [`corruption`]: patchify/unpatchify, random patch masks, and the
//!   noise-then-mask corruption used for pre-training.
//! - [`model`]: a small asymmetric transformer encoder-decoder with a
//!   classification head and reverse-mode differentiation.
//! - [`objectives`]: reconstruction, cross-entropy, and
//!   consistency-regularization losses.
//! - [`smoothing`]: the smoothed classifier, certified radii, and the
//!   Monte-Carlo CERTIFY/PREDICT procedures.
//! - [`harness`]: configs, dataset/checkpoint formats, training loops,
//!   the certification driver, and reporting.

pub mod corruption;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod smoothing;

pub use error::{Error, Result};
