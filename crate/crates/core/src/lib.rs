//! Constrained-attention variational autoencoder toolkit for unsupervised
//! anomaly localization.
//!
//! A VAE is trained on normal images only, with an extra objective that
//! forces its latent-attention map (gradient-weighted class activation on an
//! encoder feature layer) to cover a target fraction of every normal image.
//! The size constraint is an inequality relaxed through an extended
//! log-barrier, so training stays smooth while the attention is pushed to
//! tile the whole normal anatomy. At inference the raw attention map is
//! min-max normalized; regions the model cannot attend to stand out and are
//! scored as anomalies.
//!
//! Crate layout:
//! - [`autodiff`]: reverse-mode engine with differentiable backward rules
//!   (the attention map is a gradient, and training differentiates it).
//! - [`constraints`]: extended log-barrier and alternative penalties.
//! - [`model`]: encoder / decoder, reconstruction losses, KL.
//! - [`attention`]: gradient-weighted attention maps.
//! - [`training`]: two-phase optimization loop.
//! - [`inference`]: saliency extraction and thresholding.
//! - [`metrics`]: localization and detection scores.
//! - [`data`]: synthetic desk-scale dataset and manifest handling.
//! - [`checkpoint`]: binary tensor container with JSON header.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod constraints;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{CoreError, Result};
