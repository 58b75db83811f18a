//! A desk-scale laboratory for training diffusion and flow-matching models
//! with the model-guidance (MG) objective on labeled 2D Gaussian mixtures.
//!
//! Everything runs against exact analytic oracles: the data distribution is a
//! Gaussian mixture, so scores, Bayes-optimal predictors, class posteriors and
//! the MG fixed point are all available in closed form. Learned models are a
//! small feed-forward network with hand-rolled backprop, trained with either
//! the vanilla noise-prediction loss or the MG target, and evaluated with
//! two-sample metrics against ground truth.

pub mod config;
pub mod error;
pub mod metrics;
pub mod mixture;
pub mod net;
pub mod oracle;
pub mod rngutil;
pub mod sampler;
pub mod schedule;
pub mod svg;
pub mod train;
pub mod vec2;
pub mod verify;

pub mod cli;

pub use error::{Error, Result};
pub use vec2::Vec2;
