//! Patch-level anomaly detection and segmentation for images.
//!
//! The pipeline: self-supervised training of small convolutional patch
//! encoders on defect-free images, nearest-neighbor indexing of normal
//! patch features, and per-pixel anomaly maps built from feature-space
//! distances at two patch scales.
//!
//! Modules follow the pipeline order:
//!
//! * [`numerics`] — tensors, reverse-mode autodiff, Adam, checkpoints.
//! * [`model`] — patch encoders and the relative-position classifier.
//! * [`sampling`] — patch grids, jittered pairs, neighborhood pairs.
//! * [`training`] — losses and the two-phase training loop.
//! * [`feature_index`] — exact and approximate nearest-neighbor search.
//! * [`inference`] — anomaly maps, image scores, map serialization.
//! * [`evaluation`] — AUROC, intrinsic dimension, baselines, reports.
//! * [`data`] — dataset loading, preprocessing, synthetic data.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod feature_index;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
