//! Fused capsule networks for detecting alcohol influence in periocular
//! near-infrared images.
//!
//! The crate bundles everything needed to run the pipeline end to end
//! without access to a private capture database:
//!
//! - [`tensor`]: dense `f64` arrays and a tape-based reverse-mode autodiff graph.
//! - [`capsule`]: squash, primary capsules, routing-by-agreement, margin and
//!   reconstruction losses.
//! - [`models`]: the fused capsule network, the plain capsule network, the
//!   Small-VGG baseline, SGD training, grid search and checkpoints.
//! - [`data`]: a procedural periocular image generator, manifests,
//!   subject-disjoint splits and geometric augmentation.
//! - [`analysis`]: pupil/iris ratios, radius estimation, per-session
//!   histograms and the ratio-threshold classifier.
//! - [`baselines`]: an RBF-kernel SVM trained by SMO, cross-validation,
//!   embedding ingestion and confusion metrics.
//! - [`explain`]: Grad-CAM / Grad-CAM++ heatmaps and overlays.
//! - [`cli`]: the `capsforge` command-line front end.

pub mod analysis;
pub mod baselines;
pub mod capsule;
pub mod cli;
pub mod data;
mod error;
pub mod explain;
pub mod image;
mod kv;
pub mod models;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use image::Image;
