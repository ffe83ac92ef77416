//! 3D MRI ischemic stroke lesion segmentation.
//!
//! End-to-end pipeline: NIfTI ingestion, isotropic resampling and channel
//! stacking, patch-based augmented training of a residual encoder-decoder
//! segmentation network with deep supervision, cross-validation with
//! checkpoint selection, sliding-window ensemble inference back into native
//! space, and the four lesion-wise challenge metrics.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod infer;
pub mod io;
pub mod rng;
pub mod synth;
pub mod train;
pub mod volume;

pub mod augment;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod preprocess;

pub use error::{Error, Result};
