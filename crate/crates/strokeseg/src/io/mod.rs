//! Volume and manifest I/O.

pub mod manifest;
pub mod nifti;

pub use manifest::{load_manifest, save_manifest, CaseRecord, DatasetManifest};
pub use nifti::{load_mask, load_volume, save_mask, save_volume};
