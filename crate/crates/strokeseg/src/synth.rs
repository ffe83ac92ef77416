//! Synthetic sphere-lesion datasets for desk-scale runs, demos and tests.
//!
//! Each case is a noisy brain-like ellipsoid in two modalities with one
//! bright-on-DWI / dark-on-ADC spherical lesion, plus the matching label
//! mask, written as NIfTI files with a dataset manifest.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::io::{save_manifest, save_mask, save_volume, CaseRecord, DatasetManifest};
use crate::rng::{stream_rng, Stream};
use crate::volume::{ImageVolume, Modality, SegmentationMask};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub cases: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Lesion radius range in voxels.
    pub radius: (f64, f64),
    pub noise_std: f64,
    pub lesion_contrast: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            cases: 4,
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            seed: 0,
            radius: (6.0, 11.0),
            noise_std: 0.1,
            lesion_contrast: 3.0,
        }
    }
}

pub struct SyntheticCase {
    pub dwi: ImageVolume,
    pub adc: ImageVolume,
    pub label: SegmentationMask,
}

/// One random case: ellipsoidal "brain" at intensity 1, lesion sphere at
/// +contrast on DWI and -contrast on ADC, Gaussian noise everywhere inside
/// the head.
pub fn make_case(spec: &SyntheticSpec, case_index: usize) -> SyntheticCase {
    let mut rng = stream_rng(spec.seed, Stream::Synthetic, case_index as u64, 0);
    let dims = spec.dims;
    let center = [
        dims[0] as f64 / 2.0,
        dims[1] as f64 / 2.0,
        dims[2] as f64 / 2.0,
    ];
    let brain_radii = [
        dims[0] as f64 * 0.42,
        dims[1] as f64 * 0.45,
        dims[2] as f64 * 0.4,
    ];
    let radius = rng.random_range(spec.radius.0..=spec.radius.1);
    // Keep the lesion comfortably inside the head.
    let max_off = [
        (brain_radii[0] - radius - 2.0).max(0.0),
        (brain_radii[1] - radius - 2.0).max(0.0),
        (brain_radii[2] - radius - 2.0).max(0.0),
    ];
    let lesion_center = [
        center[0] + rng.random_range(-max_off[0] * 0.7..=max_off[0] * 0.7),
        center[1] + rng.random_range(-max_off[1] * 0.7..=max_off[1] * 0.7),
        center[2] + rng.random_range(-max_off[2] * 0.7..=max_off[2] * 0.7),
    ];

    let normal = rand_distr::Normal::new(0.0, spec.noise_std).expect("valid std");
    let mut dwi = Array3::<f32>::zeros((dims[0], dims[1], dims[2]));
    let mut adc = Array3::<f32>::zeros((dims[0], dims[1], dims[2]));
    let mut labels = Array3::<u8>::zeros((dims[0], dims[1], dims[2]));
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = [i as f64, j as f64, k as f64];
                let e: f64 = (0..3)
                    .map(|a| ((p[a] - center[a]) / brain_radii[a]).powi(2))
                    .sum();
                if e > 1.0 {
                    continue; // outside the skull-stripped head: exact zeros
                }
                let r2: f64 = (0..3)
                    .map(|a| (p[a] - lesion_center[a]).powi(2))
                    .sum();
                let inside_lesion = r2.sqrt() <= radius;
                let base = 1.0 + rng.sample(normal);
                let contrast = if inside_lesion { spec.lesion_contrast } else { 0.0 };
                dwi[[i, j, k]] = (base + contrast) as f32;
                adc[[i, j, k]] = (base - contrast + rng.sample(normal)) as f32;
                if inside_lesion {
                    labels[[i, j, k]] = 1;
                }
            }
        }
    }
    let geom = Geometry::identity(spec.spacing);
    SyntheticCase {
        dwi: ImageVolume::new(dwi, geom.clone(), Modality::Dwi),
        adc: ImageVolume::new(adc, geom.clone(), Modality::Adc),
        label: SegmentationMask::new(labels, geom),
    }
}

/// Write `spec.cases` cases plus `manifest.json` into `dir`; paths in the
/// manifest are relative to it.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &SyntheticSpec) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dir = &std::fs::canonicalize(dir).map_err(|e| Error::io(dir, e))?;
    let mut cases = Vec::with_capacity(spec.cases);
    for idx in 0..spec.cases {
        let case = make_case(spec, idx);
        let id = format!("case{idx:03}");
        let dwi = dir.join(format!("{id}_dwi.nii.gz"));
        let adc = dir.join(format!("{id}_adc.nii.gz"));
        let label = dir.join(format!("{id}_label.nii.gz"));
        save_volume(&case.dwi, &dwi)?;
        save_volume(&case.adc, &adc)?;
        save_mask(&case.label, &label)?;
        cases.push(CaseRecord {
            case_id: id,
            dwi,
            adc,
            flair: None,
            label: Some(label),
        });
    }
    let manifest = DatasetManifest::new(cases);
    save_manifest(&manifest, dir.join("manifest.json"))?;
    Ok(manifest)
}
