//! Training-time stochastic transforms applied jointly to image and mask:
//! axis flips, small rigid+scale warps and intensity perturbations
//! (smoothing, noise, scale, shift).
//!
//! Each random op is a thin sampler over a deterministic primitive
//! (`flip_axes`, `affine_transform`, ...) so tests can force exact
//! parameters. Geometry metadata is carried through untouched; augmented
//! patches are treated as abstract grids by the trainer.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{MultiChannelVolume, SegmentationMask};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob_per_axis: f64,
    /// Gate for the combined rotation+scaling warp.
    pub affine_prob: f64,
    /// Max |rotation| per axis, degrees.
    pub rot_range_deg: f64,
    /// Max |log-scale| deviation per axis; 0.1 gives factors near [0.9, 1.1].
    pub scale_range: f64,
    pub smooth_prob: f64,
    /// Gaussian sigma in voxels, sampled uniformly from (min, max).
    pub smooth_sigma_range: (f64, f64),
    pub noise_prob: f64,
    /// Additive noise std in normalized-intensity units.
    pub noise_std_range: (f64, f64),
    pub intensity_scale_prob: f64,
    pub intensity_scale_range: (f64, f64),
    pub intensity_shift_prob: f64,
    pub intensity_shift_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob_per_axis: 0.5,
            affine_prob: 0.3,
            rot_range_deg: 15.0,
            scale_range: 0.1,
            smooth_prob: 0.2,
            smooth_sigma_range: (0.5, 1.5),
            noise_prob: 0.2,
            noise_std_range: (0.01, 0.1),
            intensity_scale_prob: 0.3,
            intensity_scale_range: (0.9, 1.1),
            intensity_shift_prob: 0.3,
            intensity_shift_range: (-0.1, 0.1),
        }
    }
}

impl AugmentConfig {
    /// Identity configuration; every gate closed.
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_prob_per_axis: 0.0,
            affine_prob: 0.0,
            smooth_prob: 0.0,
            noise_prob: 0.0,
            intensity_scale_prob: 0.0,
            intensity_shift_prob: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob_per_axis", self.flip_prob_per_axis),
            ("affine_prob", self.affine_prob),
            ("smooth_prob", self.smooth_prob),
            ("noise_prob", self.noise_prob),
            ("intensity_scale_prob", self.intensity_scale_prob),
            ("intensity_shift_prob", self.intensity_shift_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, (lo, hi)) in [
            ("smooth_sigma_range", self.smooth_sigma_range),
            ("noise_std_range", self.noise_std_range),
            ("intensity_scale_range", self.intensity_scale_range),
            ("intensity_shift_range", self.intensity_shift_range),
        ] {
            if lo > hi {
                return Err(Error::Config(format!("{name} has min {lo} > max {hi}")));
            }
        }
        if self.rot_range_deg < 0.0 || self.scale_range < 0.0 {
            return Err(Error::Config(
                "rot_range_deg and scale_range must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn check_aligned(img: &MultiChannelVolume, mask: Option<&SegmentationMask>) -> Result<()> {
    if let Some(m) = mask {
        if m.dims() != img.dims() {
            return Err(Error::Alignment(format!(
                "mask dims {:?} do not match image dims {:?}",
                m.dims(),
                img.dims()
            )));
        }
    }
    Ok(())
}

/// Reverse the chosen spatial axes of image and mask identically.
pub fn flip_axes(
    img: &MultiChannelVolume,
    mask: Option<&SegmentationMask>,
    axes: [bool; 3],
) -> (MultiChannelVolume, Option<SegmentationMask>) {
    let mut data = img.data.clone();
    let mut labels = mask.map(|m| m.labels.clone());
    for (a, &flip) in axes.iter().enumerate() {
        if flip {
            data.invert_axis(Axis(a + 1));
            if let Some(l) = labels.as_mut() {
                l.invert_axis(Axis(a));
            }
        }
    }
    (
        MultiChannelVolume {
            data: data.as_standard_layout().to_owned(),
            geom: img.geom.clone(),
            channel_names: img.channel_names.clone(),
        },
        labels.map(|l| {
            SegmentationMask::new(
                l.as_standard_layout().to_owned(),
                mask.unwrap().geom.clone(),
            )
        }),
    )
}

/// One rigid+scale warp. `rot_deg[k]` rotates the plane of the other two
/// axes, counterclockwise from the lower- toward the higher-numbered axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rot_deg: [f64; 3],
    pub scale: [f64; 3],
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            rot_deg: [0.0; 3],
            scale: [1.0; 3],
        }
    }

    /// Forward voxel map: p_out = R * S * (p_in - c) + c.
    fn matrix(&self) -> Matrix3<f64> {
        let [a, b, g] = self.rot_deg.map(|d| d.to_radians());
        // Rotation about axis 0 acts on the (1,2) plane, etc.
        let r0 = Matrix3::new(
            1.0, 0.0, 0.0,
            0.0, a.cos(), -a.sin(),
            0.0, a.sin(), a.cos(),
        );
        let r1 = Matrix3::new(
            b.cos(), 0.0, b.sin(),
            0.0, 1.0, 0.0,
            -b.sin(), 0.0, b.cos(),
        );
        let r2 = Matrix3::new(
            g.cos(), -g.sin(), 0.0,
            g.sin(), g.cos(), 0.0,
            0.0, 0.0, 1.0,
        );
        let s = Matrix3::from_diagonal(&Vector3::new(self.scale[0], self.scale[1], self.scale[2]));
        r0 * r1 * r2 * s
    }
}

/// Resample image (trilinear) and mask (nearest) through one shared warp.
/// Output dims match the input; out-of-field voxels fill with 0.
pub fn affine_transform(
    img: &MultiChannelVolume,
    mask: Option<&SegmentationMask>,
    params: &AffineParams,
) -> Result<(MultiChannelVolume, Option<SegmentationMask>)> {
    check_aligned(img, mask)?;
    let dims = img.dims();
    let center = Vector3::new(
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    );
    let inverse = params
        .matrix()
        .try_inverse()
        .ok_or_else(|| Error::Config("affine transform is singular".into()))?;

    let channels = img.channels();
    let mut data = Array4::zeros((channels, dims[0], dims[1], dims[2]));
    let mut labels = mask.map(|_| Array3::<u8>::zeros((dims[0], dims[1], dims[2])));

    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let out = Vector3::new(i as f64, j as f64, k as f64) - center;
                let src = inverse * out + center;
                let inside = (0..3).all(|a| src[a] > -0.5 && src[a] < dims[a] as f64 - 0.5);
                if !inside {
                    continue; // fill stays 0, the normalized background value
                }
                for c in 0..channels {
                    data[[c, i, j, k]] = trilinear_at(&img.data, c, dims, &src);
                }
                if let (Some(out_l), Some(m)) = (labels.as_mut(), mask) {
                    let ni = (src[0].round().max(0.0) as usize).min(dims[0] - 1);
                    let nj = (src[1].round().max(0.0) as usize).min(dims[1] - 1);
                    let nk = (src[2].round().max(0.0) as usize).min(dims[2] - 1);
                    out_l[[i, j, k]] = m.labels[[ni, nj, nk]];
                }
            }
        }
    }
    Ok((
        MultiChannelVolume {
            data,
            geom: img.geom.clone(),
            channel_names: img.channel_names.clone(),
        },
        labels.map(|l| SegmentationMask::new(l, mask.unwrap().geom.clone())),
    ))
}

fn trilinear_at(data: &Array4<f32>, c: usize, dims: [usize; 3], src: &Vector3<f64>) -> f32 {
    let mut idx = [(0usize, 0usize, 0.0f64); 3];
    for a in 0..3 {
        let x = src[a].clamp(0.0, dims[a] as f64 - 1.0);
        let x0 = x.floor();
        let i0 = x0 as usize;
        let i1 = (i0 + 1).min(dims[a] - 1);
        idx[a] = (i0, i1, x - x0);
    }
    let (i0, i1, wi) = idx[0];
    let (j0, j1, wj) = idx[1];
    let (k0, k1, wk) = idx[2];
    let f = |i: usize, j: usize, k: usize| data[[c, i, j, k]] as f64;
    let c00 = f(i0, j0, k0) * (1.0 - wk) + f(i0, j0, k1) * wk;
    let c01 = f(i0, j1, k0) * (1.0 - wk) + f(i0, j1, k1) * wk;
    let c10 = f(i1, j0, k0) * (1.0 - wk) + f(i1, j0, k1) * wk;
    let c11 = f(i1, j1, k0) * (1.0 - wk) + f(i1, j1, k1) * wk;
    let c0 = c00 * (1.0 - wj) + c01 * wj;
    let c1 = c10 * (1.0 - wj) + c11 * wj;
    (c0 * (1.0 - wi) + c1 * wi) as f32
}

/// Gaussian-smooth every channel in place, sigma in voxels. Border taps are
/// renormalized so constants are preserved exactly.
pub fn gaussian_smooth(img: &mut MultiChannelVolume, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|t| (-0.5 * (t as f64 / sigma).powi(2)).exp())
        .collect();
    let dims = img.dims();
    for c in 0..img.channels() {
        let mut channel = img.data.index_axis(Axis(0), c).to_owned();
        for axis in 0..3 {
            let mut next = channel.clone();
            let len = dims[axis];
            for (idx, v) in next.indexed_iter_mut() {
                let pos = [idx.0, idx.1, idx.2];
                let x = pos[axis] as isize;
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (t, &w) in (-radius..=radius).zip(&weights) {
                    let xx = x + t;
                    if xx < 0 || xx >= len as isize {
                        continue;
                    }
                    let mut p = pos;
                    p[axis] = xx as usize;
                    acc += w * channel[[p[0], p[1], p[2]]] as f64;
                    wsum += w;
                }
                *v = (acc / wsum) as f32;
            }
            channel = next;
        }
        img.data.index_axis_mut(Axis(0), c).assign(&channel);
    }
}

/// Flip each spatial axis independently with `flip_prob_per_axis`.
pub fn random_flip(
    img: &MultiChannelVolume,
    mask: Option<&SegmentationMask>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(MultiChannelVolume, Option<SegmentationMask>)> {
    check_aligned(img, mask)?;
    let axes = [
        rng.random::<f64>() < cfg.flip_prob_per_axis,
        rng.random::<f64>() < cfg.flip_prob_per_axis,
        rng.random::<f64>() < cfg.flip_prob_per_axis,
    ];
    Ok(flip_axes(img, mask, axes))
}

/// With `affine_prob`, sample one rigid+scale transform and apply it.
pub fn random_affine(
    img: &MultiChannelVolume,
    mask: Option<&SegmentationMask>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(MultiChannelVolume, Option<SegmentationMask>)> {
    check_aligned(img, mask)?;
    if rng.random::<f64>() >= cfg.affine_prob {
        return Ok((img.clone(), mask.cloned()));
    }
    let r = cfg.rot_range_deg;
    let s = cfg.scale_range;
    let params = AffineParams {
        rot_deg: [
            sample_range(rng, -r, r),
            sample_range(rng, -r, r),
            sample_range(rng, -r, r),
        ],
        scale: [
            sample_range(rng, -s, s).exp(),
            sample_range(rng, -s, s).exp(),
            sample_range(rng, -s, s).exp(),
        ],
    };
    affine_transform(img, mask, &params)
}

/// Smoothing, additive noise, multiplicative scale and additive shift, in
/// that fixed order, each behind its own gate. The mask is untouched.
pub fn random_intensity(
    img: &MultiChannelVolume,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> MultiChannelVolume {
    let mut out = img.clone();
    if rng.random::<f64>() < cfg.smooth_prob {
        let sigma = sample_range(rng, cfg.smooth_sigma_range.0, cfg.smooth_sigma_range.1);
        gaussian_smooth(&mut out, sigma);
    }
    if rng.random::<f64>() < cfg.noise_prob {
        let std = sample_range(rng, cfg.noise_std_range.0, cfg.noise_std_range.1) as f32;
        if std > 0.0 {
            let normal = rand_distr::Normal::new(0.0f32, std).expect("std checked positive");
            out.data.mapv_inplace(|v| v + rng.sample(normal));
        }
    }
    if rng.random::<f64>() < cfg.intensity_scale_prob {
        let factor = sample_range(
            rng,
            cfg.intensity_scale_range.0,
            cfg.intensity_scale_range.1,
        ) as f32;
        out.data.mapv_inplace(|v| v * factor);
    }
    if rng.random::<f64>() < cfg.intensity_shift_prob {
        let delta = sample_range(
            rng,
            cfg.intensity_shift_range.0,
            cfg.intensity_shift_range.1,
        ) as f32;
        out.data.mapv_inplace(|v| v + delta);
    }
    out
}

fn sample_range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Full augmentation: flip, then affine, then intensity.
pub fn augment(
    img: &MultiChannelVolume,
    mask: Option<&SegmentationMask>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(MultiChannelVolume, Option<SegmentationMask>)> {
    cfg.validate()?;
    let (img, mask) = random_flip(img, mask, cfg, rng)?;
    let (img, mask) = random_affine(&img, mask.as_ref(), cfg, rng)?;
    let img = random_intensity(&img, cfg, rng);
    Ok((img, mask))
}
