//! Multiview stem-and-trunk transformer for brain-age regression, trained
//! end to end on a synthetic volumetric corpus with a planted aging signal.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`rng`], [`tape`]: dense f64 tensors, deterministic random
//!   streams, and reverse-mode autodiff.
//! - [`attention`], [`flops`]: scaled dot-product attention, the m-query
//!   stem, the trunk block, and analytic FLOP accounting.
//! - [`model`], [`checkpoint`]: the full regression model and its on-disk
//!   checkpoint format.
//! - [`synth`], [`corpus`]: phantom generation with planted age signal and
//!   the preprocessing / split pipeline.
//! - [`train`]: MSE objective, Adam, step decay, the epoch loop.
//! - [`stats`]: MAE, brain-age-gap summaries, correlations, Welch tests.
//! - [`attribution`]: input-gradient maps fused across views and the
//!   gradient-per-volume region ranking.
//! - [`svg`]: dependency-free figures for reports.

pub mod attention;
pub mod attribution;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod fdcheck;
pub mod flops;
pub mod model;
pub mod rng;
pub mod stats;
pub mod svg;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Tensor};
