//! Dual pseudo training at desk scale.
//!
//! A self-supervised encoder with a linear probe labels every real item,
//! a class-conditional diffusion model is trained on those pseudo labels,
//! and the samples it generates are fed back to retrain the probe. The
//! crate also carries the evaluation side: per-class precision/recall,
//! their stage-to-stage deltas, and a closed-form Fréchet distance.
//!
//! Modules map one-to-one onto the moving parts:
//!
//! - [`numcore`]: dense tensors, MLP forward/backward, embeddings, Adam/SGD,
//!   checkpoint serialization.
//! - [`diffusion`]: noise schedule, ε-prediction loss, classifier-free
//!   guidance and ancestral sampling.
//! - [`ssl`]: prototype-based self-supervised encoder with an EMA target
//!   branch, plus the linear probe.
//! - [`data`]: synthetic Gaussian mixtures, semi-supervised splits, CSV I/O.
//! - [`metrics`]: accuracy, confusion matrices, per-class P/R, Fréchet distance.
//! - [`pipeline`]: the stage drivers and the run manifest.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod numcore;
pub mod pipeline;
pub mod rng;
pub mod ssl;

pub use error::{Error, Result};
