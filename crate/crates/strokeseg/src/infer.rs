//! Whole-volume prediction: overlapping-window tiling with center-peaked
//! blending, multi-checkpoint probability averaging, argmax binarization
//! and nearest-neighbor restoration onto the native DWI grid.

use std::path::PathBuf;

use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::loss::softmax;
use crate::nn::segresnet::{NetworkConfig, SegResNet};
use crate::nn::weights::load_weights;
use crate::preprocess::{pad_to_min, NativeGeometryRecord};
use crate::volume::{MultiChannelVolume, SegmentationMask};

/// Per-class probabilities over a working-space grid.
#[derive(Debug, Clone)]
pub struct ProbabilityMap {
    /// (classes, dim0, dim1, dim2); channel sums are 1 per voxel.
    pub probs: Array4<f32>,
    pub geom: Geometry,
}

impl ProbabilityMap {
    pub fn classes(&self) -> usize {
        self.probs.dim().0
    }

    pub fn dims(&self) -> [usize; 3] {
        let d = self.probs.dim();
        [d.1, d.2, d.3]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub checkpoint_paths: Vec<PathBuf>,
    pub network: NetworkConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Tile size; must be divisible by the network's downsampling factor.
    pub window: [usize; 3],
    /// Fraction of the window shared by neighboring tiles, in [0, 1).
    pub overlap: f64,
    /// Also write per-case foreground probability volumes.
    pub save_probs: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            window: [192, 192, 128],
            overlap: 0.5,
            save_probs: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "overlap {} outside [0, 1)",
                self.overlap
            )));
        }
        if self.window.iter().any(|&w| w == 0) {
            return Err(Error::Config("window components must be > 0".into()));
        }
        Ok(())
    }
}

/// Tile start offsets covering [0, dim) with the requested overlap; the last
/// tile is flush with the end so every voxel is covered.
fn tile_starts(dim: usize, window: usize, overlap: f64) -> Vec<usize> {
    if dim <= window {
        return vec![0];
    }
    let stride = ((window as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let mut starts = Vec::new();
    let mut s = 0usize;
    loop {
        if s + window >= dim {
            starts.push(dim - window);
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts.dedup();
    starts
}

/// Center-peaked (Gaussian) importance profile along one axis.
fn importance_1d(len: usize) -> Vec<f64> {
    let center = (len as f64 - 1.0) / 2.0;
    let sigma = 0.125 * len as f64;
    (0..len)
        .map(|i| {
            let z = (i as f64 - center) / sigma;
            (-0.5 * z * z).exp().max(1e-6)
        })
        .collect()
}

/// Tile the volume, softmax each window's full-resolution logits and blend
/// with center-peaked weights. Blend weights normalize per voxel, so channel
/// sums stay 1.
pub fn sliding_window_predict(
    net: &SegResNet<f32>,
    vol: &MultiChannelVolume,
    cfg: &InferenceConfig,
) -> Result<ProbabilityMap> {
    cfg.validate()?;
    let div = net.cfg.divisor();
    for (axis, w) in cfg.window.iter().enumerate() {
        if w % div != 0 {
            return Err(Error::Config(format!(
                "window axis {axis} ({w}) not divisible by the network factor {div}"
            )));
        }
    }
    let (padded, record) = pad_to_min(vol, cfg.window, 0.0);
    let dims = padded.dims();
    let classes = net.cfg.out_channels;

    // Single-tile fast path: plain forward + softmax.
    if dims == cfg.window {
        let logits = net.forward(&padded.data)?;
        let probs = softmax(&logits[0]);
        let probs = record.crop_array4(&probs);
        return Ok(ProbabilityMap {
            probs,
            geom: vol.geom.clone(),
        });
    }

    let starts: [Vec<usize>; 3] = [
        tile_starts(dims[0], cfg.window[0], cfg.overlap),
        tile_starts(dims[1], cfg.window[1], cfg.overlap),
        tile_starts(dims[2], cfg.window[2], cfg.overlap),
    ];
    let profile: [Vec<f64>; 3] = [
        importance_1d(cfg.window[0]),
        importance_1d(cfg.window[1]),
        importance_1d(cfg.window[2]),
    ];

    let mut acc = ArrayD::<f64>::zeros(IxDyn(&[classes, dims[0], dims[1], dims[2]]));
    let mut wsum = Array3::<f64>::zeros((dims[0], dims[1], dims[2]));
    for &s0 in &starts[0] {
        for &s1 in &starts[1] {
            for &s2 in &starts[2] {
                let tile = padded
                    .data
                    .slice(ndarray::s![
                        ..,
                        s0..s0 + cfg.window[0],
                        s1..s1 + cfg.window[1],
                        s2..s2 + cfg.window[2]
                    ])
                    .to_owned();
                let logits = net.forward(&tile)?;
                let probs = softmax(&logits[0]);
                for c in 0..classes {
                    for i in 0..cfg.window[0] {
                        for j in 0..cfg.window[1] {
                            let w01 = profile[0][i] * profile[1][j];
                            for k in 0..cfg.window[2] {
                                let w = w01 * profile[2][k];
                                acc[[c, s0 + i, s1 + j, s2 + k]] +=
                                    w * probs[[c, i, j, k]] as f64;
                            }
                        }
                    }
                }
                for i in 0..cfg.window[0] {
                    for j in 0..cfg.window[1] {
                        let w01 = profile[0][i] * profile[1][j];
                        for k in 0..cfg.window[2] {
                            wsum[[s0 + i, s1 + j, s2 + k]] += w01 * profile[2][k];
                        }
                    }
                }
            }
        }
    }
    if wsum.iter().any(|&w| w <= 0.0) {
        return Err(Error::Shape(
            "sliding-window tiling left voxels uncovered".into(),
        ));
    }
    let mut probs = Array4::<f32>::zeros((classes, dims[0], dims[1], dims[2]));
    for c in 0..classes {
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    probs[[c, i, j, k]] = (acc[[c, i, j, k]] / wsum[[i, j, k]]) as f32;
                }
            }
        }
    }
    Ok(ProbabilityMap {
        probs: record.crop_array4(&probs),
        geom: vol.geom.clone(),
    })
}

/// Load every checkpoint strictly (all are validated before any inference
/// runs) and average the per-model probability maps. Accumulation happens in
/// f64 and in path order, so the mean of k identical models reproduces a
/// single model bit-for-bit in f32.
pub fn ensemble_predict(
    spec: &EnsembleSpec,
    vol: &MultiChannelVolume,
    cfg: &InferenceConfig,
) -> Result<ProbabilityMap> {
    let nets = load_ensemble(spec)?;
    ensemble_predict_with(&nets, vol, cfg)
}

/// Strictly load all ensemble members up front.
pub fn load_ensemble(spec: &EnsembleSpec) -> Result<Vec<SegResNet<f32>>> {
    if spec.checkpoint_paths.is_empty() {
        return Err(Error::Config("ensemble needs at least one checkpoint".into()));
    }
    spec.checkpoint_paths
        .iter()
        .map(|path| {
            let (net, _) = load_weights::<f32>(path, &spec.network, true, 0).map_err(|e| {
                Error::Weights(format!("checkpoint {}: {e}", path.display()))
            })?;
            Ok(net)
        })
        .collect()
}

pub fn ensemble_predict_with(
    nets: &[SegResNet<f32>],
    vol: &MultiChannelVolume,
    cfg: &InferenceConfig,
) -> Result<ProbabilityMap> {
    let mut acc: Option<ArrayD<f64>> = None;
    let mut geom = vol.geom.clone();
    for net in nets {
        let pm = sliding_window_predict(net, vol, cfg)?;
        geom = pm.geom.clone();
        let as64 = pm.probs.mapv(|v| v as f64).into_dyn();
        acc = Some(match acc {
            None => as64,
            Some(mut a) => {
                a += &as64;
                a
            }
        });
    }
    let acc = acc.expect("non-empty ensemble");
    let k = nets.len() as f64;
    let probs = acc
        .mapv(|v| (v / k) as f32)
        .into_dimensionality::<ndarray::Ix4>()
        .expect("4D accumulator");
    Ok(ProbabilityMap { probs, geom })
}

/// Argmax over classes; ties resolve to the lower class index, so an exact
/// 0.5/0.5 tie stays background.
pub fn binarize(pm: &ProbabilityMap) -> SegmentationMask {
    let (c, d0, d1, d2) = pm.probs.dim();
    let mut labels = Array3::<u8>::zeros((d0, d1, d2));
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let mut best = 0usize;
                let mut best_p = pm.probs[[0, i, j, k]];
                for ch in 1..c {
                    let p = pm.probs[[ch, i, j, k]];
                    if p > best_p {
                        best_p = p;
                        best = ch;
                    }
                }
                labels[[i, j, k]] = best as u8;
            }
        }
    }
    SegmentationMask::new(labels, pm.geom.clone())
}

/// Nearest-neighbor resample of a working-space mask onto the case's native
/// DWI grid; the output header equals the native one exactly.
pub fn restore_native(
    mask: &SegmentationMask,
    record: &NativeGeometryRecord,
) -> Result<SegmentationMask> {
    if mask.dims() != record.work_dims {
        return Err(Error::Alignment(format!(
            "mask dims {:?} do not match the recorded working dims {:?} for case \"{}\"",
            mask.dims(),
            record.work_dims,
            record.case_id
        )));
    }
    if record.native_dims == record.work_dims && record.native_geom == record.work_geom {
        return Ok(SegmentationMask::new(
            mask.labels.clone(),
            record.native_geom.clone(),
        ));
    }
    let nd = record.native_dims;
    let wd = record.work_dims;
    let mut labels = Array3::<u8>::zeros((nd[0], nd[1], nd[2]));
    for i in 0..nd[0] {
        for j in 0..nd[1] {
            for k in 0..nd[2] {
                let world = record
                    .native_geom
                    .index_to_world([i as f64, j as f64, k as f64]);
                let widx = record.work_geom.world_to_index(world);
                let wi = widx[0].round();
                let wj = widx[1].round();
                let wk = widx[2].round();
                if wi < 0.0 || wj < 0.0 || wk < 0.0 {
                    continue;
                }
                let (wi, wj, wk) = (wi as usize, wj as usize, wk as usize);
                if wi >= wd[0] || wj >= wd[1] || wk >= wd[2] {
                    continue;
                }
                labels[[i, j, k]] = mask.labels[[wi, wj, wk]];
            }
        }
    }
    Ok(SegmentationMask::new(labels, record.native_geom.clone()))
}

/// Foreground-probability volume (class 1) for optional export.
pub fn foreground_probability(pm: &ProbabilityMap) -> crate::volume::ImageVolume {
    crate::volume::ImageVolume::new(
        pm.probs.index_axis(Axis(0), 1).to_owned(),
        pm.geom.clone(),
        crate::volume::Modality::Other,
    )
}
