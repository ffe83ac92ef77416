//! Per-case preparation: isotropic resampling, channel stacking, intensity
//! normalization, padding and patch sampling.

use ndarray::{Array3, Array4, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::io::{self, CaseRecord};
use crate::volume::{ImageVolume, Modality, MultiChannelVolume, SegmentationMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    Trilinear,
    Nearest,
}

/// Where normalization statistics come from. Volumes arrive skull-stripped
/// with a large zero background, so both readings of "each MRI image" are
/// kept available; whole-volume statistics are the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormRegion {
    #[default]
    All,
    Nonzero,
}

/// Channel stds below this leave the channel all zeros instead of dividing.
pub const NORM_STD_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    /// Patch size in voxels, per array axis.
    pub size: [usize; 3],
    /// Probability that a sampled crop is centered on a foreground voxel.
    pub foreground_bias: f64,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec {
            size: [192, 192, 128],
            foreground_bias: 0.75,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| s == 0) {
            return Err(Error::Config("crop size components must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.foreground_bias) {
            return Err(Error::Config(format!(
                "foreground_bias {} outside [0, 1]",
                self.foreground_bias
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_spacing: [f64; 3],
    pub norm_region: NormRegion,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing: [1.0, 1.0, 1.0],
            norm_region: NormRegion::All,
        }
    }
}

/// Everything needed to take a working-space result back onto the case's
/// native DWI grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NativeGeometryRecord {
    pub case_id: String,
    pub native_dims: [usize; 3],
    pub native_geom: Geometry,
    pub work_dims: [usize; 3],
    pub work_geom: Geometry,
}

fn output_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    let mut out = [0usize; 3];
    for a in 0..3 {
        out[a] = ((dims[a] as f64 * spacing[a] / target[a]).ceil() as usize).max(1);
    }
    out
}

/// Per-axis interpolation table: source indices i0/i1 and the i1 weight.
fn axis_table(out_dim: usize, in_dim: usize, scale: f64) -> Vec<(usize, usize, f64)> {
    (0..out_dim)
        .map(|i| {
            let x = i as f64 * scale;
            let x0 = x.floor();
            let i0 = (x0.max(0.0) as usize).min(in_dim - 1);
            let i1 = (i0 + 1).min(in_dim - 1);
            let w = (x - x0).clamp(0.0, 1.0);
            (i0, i1, w)
        })
        .collect()
}

fn resampled_geometry(geom: &Geometry, target: [f64; 3]) -> Geometry {
    Geometry {
        spacing: target,
        origin: geom.origin,
        direction: geom.direction,
    }
}

/// Resample one volume onto a grid with the requested spacing. Voxel (0,0,0)
/// keeps its world position; output dims are ceil(dim * spacing / target).
pub fn resample(
    vol: &ImageVolume,
    target_spacing: [f64; 3],
    mode: ResampleMode,
) -> Result<ImageVolume> {
    if target_spacing.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Config(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let dims = vol.dims();
    if dims.iter().any(|&d| d < 1) {
        return Err(Error::Shape(format!("degenerate input dims {dims:?}")));
    }
    if vol.geom.spacing == target_spacing {
        return Ok(vol.clone());
    }
    let data = resample_array(
        &vol.data,
        dims,
        vol.geom.spacing,
        target_spacing,
        mode,
        |v| v,
        |v| v,
    );
    Ok(ImageVolume::new(
        data,
        resampled_geometry(&vol.geom, target_spacing),
        vol.modality,
    ))
}

/// Nearest-neighbor mask resampling; labels stay integral by construction.
pub fn resample_mask(mask: &SegmentationMask, target_spacing: [f64; 3]) -> Result<SegmentationMask> {
    if target_spacing.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Config(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    if mask.geom.spacing == target_spacing {
        return Ok(mask.clone());
    }
    let labels = resample_array(
        &mask.labels,
        mask.dims(),
        mask.geom.spacing,
        target_spacing,
        ResampleMode::Nearest,
        |v| v as f32,
        |v| v as u8,
    );
    Ok(SegmentationMask::new(
        labels,
        resampled_geometry(&mask.geom, target_spacing),
    ))
}

fn resample_array<T: Copy + Send + Sync>(
    data: &Array3<T>,
    dims: [usize; 3],
    spacing: [f64; 3],
    target: [f64; 3],
    mode: ResampleMode,
    to_f32: impl Fn(T) -> f32 + Sync,
    from_f32: impl Fn(f32) -> T + Sync,
) -> Array3<T> {
    let out_dims = output_dims(dims, spacing, target);
    let tables: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| axis_table(out_dims[a], dims[a], target[a] / spacing[a]))
        .collect();
    let mut out = Vec::with_capacity(out_dims[0] * out_dims[1] * out_dims[2]);
    let plane = out_dims[1] * out_dims[2];
    (0..out_dims[0])
        .into_par_iter()
        .map(|i| {
            let (i0, i1, wi) = tables[0][i];
            let mut slab = Vec::with_capacity(plane);
            for &(j0, j1, wj) in &tables[1] {
                for &(k0, k1, wk) in &tables[2] {
                    let v = match mode {
                        ResampleMode::Nearest => {
                            let ii = if wi < 0.5 { i0 } else { i1 };
                            let jj = if wj < 0.5 { j0 } else { j1 };
                            let kk = if wk < 0.5 { k0 } else { k1 };
                            data[[ii, jj, kk]]
                        }
                        ResampleMode::Trilinear => {
                            let c000 = to_f32(data[[i0, j0, k0]]) as f64;
                            let c001 = to_f32(data[[i0, j0, k1]]) as f64;
                            let c010 = to_f32(data[[i0, j1, k0]]) as f64;
                            let c011 = to_f32(data[[i0, j1, k1]]) as f64;
                            let c100 = to_f32(data[[i1, j0, k0]]) as f64;
                            let c101 = to_f32(data[[i1, j0, k1]]) as f64;
                            let c110 = to_f32(data[[i1, j1, k0]]) as f64;
                            let c111 = to_f32(data[[i1, j1, k1]]) as f64;
                            let c00 = c000 * (1.0 - wk) + c001 * wk;
                            let c01 = c010 * (1.0 - wk) + c011 * wk;
                            let c10 = c100 * (1.0 - wk) + c101 * wk;
                            let c11 = c110 * (1.0 - wk) + c111 * wk;
                            let c0 = c00 * (1.0 - wj) + c01 * wj;
                            let c1 = c10 * (1.0 - wj) + c11 * wj;
                            from_f32((c0 * (1.0 - wi) + c1 * wi) as f32)
                        }
                    };
                    slab.push(v);
                }
            }
            slab
        })
        .collect::<Vec<_>>()
        .into_iter()
        .for_each(|slab| out.extend(slab));
    Array3::from_shape_vec((out_dims[0], out_dims[1], out_dims[2]), out)
        .expect("slab sizes match output dims")
}

/// Stack aligned single-modality volumes into one multi-channel input.
pub fn stack_channels(vols: &[ImageVolume]) -> Result<MultiChannelVolume> {
    let first = vols
        .first()
        .ok_or_else(|| Error::Validation("cannot stack zero channels".into()))?;
    let dims = first.dims();
    for v in vols.iter().skip(1) {
        if v.dims() != dims {
            return Err(Error::Alignment(format!(
                "channel dims differ: {:?} vs {:?}; resample to a common grid first",
                dims,
                v.dims()
            )));
        }
        if !v.geom.approx_eq(&first.geom, 1e-4) {
            return Err(Error::Alignment(
                "channel geometries differ beyond 1e-4 mm; resample to a common grid first".into(),
            ));
        }
    }
    let mut data = Array4::zeros((vols.len(), dims[0], dims[1], dims[2]));
    for (c, v) in vols.iter().enumerate() {
        data.index_axis_mut(Axis(0), c).assign(&v.data);
    }
    Ok(MultiChannelVolume {
        data,
        geom: first.geom.clone(),
        channel_names: vols.iter().map(|v| v.modality.to_string()).collect(),
    })
}

/// Shift/scale every channel to zero mean and unit std. Channels with std
/// below `NORM_STD_EPSILON` become all zeros; inference must not crash on
/// flat inputs.
pub fn normalize(vol: &MultiChannelVolume, region: NormRegion) -> MultiChannelVolume {
    let mut out = vol.clone();
    for c in 0..vol.channels() {
        let mut channel = out.data.index_axis_mut(Axis(0), c);
        let mut n = 0usize;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for &v in channel.iter() {
            if region == NormRegion::Nonzero && v == 0.0 {
                continue;
            }
            n += 1;
            sum += v as f64;
            sumsq += (v as f64) * (v as f64);
        }
        if n == 0 {
            channel.fill(0.0);
            continue;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        if std < NORM_STD_EPSILON {
            channel.fill(0.0);
        } else {
            let (m, s) = (mean as f32, std as f32);
            channel.mapv_inplace(|v| (v - m) / s);
        }
    }
    out
}

/// Inverse bookkeeping for `pad_to_min`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadRecord {
    pub lo: [usize; 3],
    pub original_dims: [usize; 3],
    pub padded_dims: [usize; 3],
}

impl PadRecord {
    pub fn is_empty(&self) -> bool {
        self.padded_dims == self.original_dims
    }

    /// Slice a padded 3D array back to the original extent.
    pub fn crop_array3<T: Clone>(&self, arr: &Array3<T>) -> Array3<T> {
        arr.slice(ndarray::s![
            self.lo[0]..self.lo[0] + self.original_dims[0],
            self.lo[1]..self.lo[1] + self.original_dims[1],
            self.lo[2]..self.lo[2] + self.original_dims[2]
        ])
        .to_owned()
    }

    /// Slice a padded channels-first 4D array back to the original extent.
    pub fn crop_array4<T: Clone>(&self, arr: &Array4<T>) -> Array4<T> {
        arr.slice(ndarray::s![
            ..,
            self.lo[0]..self.lo[0] + self.original_dims[0],
            self.lo[1]..self.lo[1] + self.original_dims[1],
            self.lo[2]..self.lo[2] + self.original_dims[2]
        ])
        .to_owned()
    }
}

fn pad_split(dim: usize, min: usize) -> (usize, usize) {
    let total = min.saturating_sub(dim);
    (total / 2, total - total / 2) // extra voxel goes on the high side
}

/// Center-pad an image so every dim reaches at least `min_size`.
pub fn pad_to_min(
    vol: &MultiChannelVolume,
    min_size: [usize; 3],
    fill: f32,
) -> (MultiChannelVolume, PadRecord) {
    let dims = vol.dims();
    let out_dims = [
        dims[0].max(min_size[0]),
        dims[1].max(min_size[1]),
        dims[2].max(min_size[2]),
    ];
    let record = PadRecord {
        lo: [
            pad_split(dims[0], min_size[0]).0,
            pad_split(dims[1], min_size[1]).0,
            pad_split(dims[2], min_size[2]).0,
        ],
        original_dims: dims,
        padded_dims: out_dims,
    };
    if out_dims == dims {
        return (vol.clone(), record);
    }
    let c = vol.channels();
    let mut data = Array4::from_elem((c, out_dims[0], out_dims[1], out_dims[2]), fill);
    data.slice_mut(ndarray::s![
        ..,
        record.lo[0]..record.lo[0] + dims[0],
        record.lo[1]..record.lo[1] + dims[1],
        record.lo[2]..record.lo[2] + dims[2]
    ])
    .assign(&vol.data);
    let mut geom = vol.geom.clone();
    geom.origin = vol.geom.index_to_world([
        -(record.lo[0] as f64),
        -(record.lo[1] as f64),
        -(record.lo[2] as f64),
    ]);
    (
        MultiChannelVolume {
            data,
            geom,
            channel_names: vol.channel_names.clone(),
        },
        record,
    )
}

/// Center-pad a mask with background so it tracks a padded image.
pub fn pad_mask_to_min(mask: &SegmentationMask, min_size: [usize; 3]) -> SegmentationMask {
    let dims = mask.dims();
    let out_dims = [
        dims[0].max(min_size[0]),
        dims[1].max(min_size[1]),
        dims[2].max(min_size[2]),
    ];
    if out_dims == dims {
        return mask.clone();
    }
    let lo = [
        pad_split(dims[0], min_size[0]).0,
        pad_split(dims[1], min_size[1]).0,
        pad_split(dims[2], min_size[2]).0,
    ];
    let mut labels = Array3::zeros((out_dims[0], out_dims[1], out_dims[2]));
    labels
        .slice_mut(ndarray::s![
            lo[0]..lo[0] + dims[0],
            lo[1]..lo[1] + dims[1],
            lo[2]..lo[2] + dims[2]
        ])
        .assign(&mask.labels);
    let mut geom = mask.geom.clone();
    geom.origin =
        mask.geom
            .index_to_world([-(lo[0] as f64), -(lo[1] as f64), -(lo[2] as f64)]);
    SegmentationMask::new(labels, geom)
}

/// Sample one training patch; image and mask crop with identical offsets.
/// With probability `foreground_bias` (and a non-empty mask) the patch is
/// centered on a random foreground voxel, so it always contains lesion.
pub fn sample_crop(
    vol: &MultiChannelVolume,
    mask: Option<&SegmentationMask>,
    spec: &CropSpec,
    rng: &mut impl Rng,
) -> Result<(MultiChannelVolume, Option<SegmentationMask>)> {
    spec.validate()?;
    let dims = vol.dims();
    for a in 0..3 {
        if dims[a] < spec.size[a] {
            return Err(Error::Shape(format!(
                "volume dims {dims:?} smaller than crop size {:?} on axis {a}; pad first",
                spec.size
            )));
        }
    }
    if let Some(m) = mask {
        if m.dims() != dims {
            return Err(Error::Alignment(format!(
                "mask dims {:?} do not match volume dims {dims:?}",
                m.dims()
            )));
        }
    }

    // Fixed draw order keeps the stream position independent of mask content.
    let u: f64 = rng.random();
    let start = if let Some(m) = mask.filter(|_| u < spec.foreground_bias) {
        let fg: Vec<[usize; 3]> = m
            .labels
            .indexed_iter()
            .filter(|(_, &v)| v == 1)
            .map(|((i, j, k), _)| [i, j, k])
            .collect();
        if fg.is_empty() {
            uniform_start(dims, spec.size, rng)
        } else {
            let center = fg[rng.random_range(0..fg.len())];
            let mut s = [0usize; 3];
            for a in 0..3 {
                let half = spec.size[a] / 2;
                s[a] = center[a]
                    .saturating_sub(half)
                    .min(dims[a] - spec.size[a]);
            }
            s
        }
    } else {
        uniform_start(dims, spec.size, rng)
    };

    let img = MultiChannelVolume {
        data: vol
            .data
            .slice(ndarray::s![
                ..,
                start[0]..start[0] + spec.size[0],
                start[1]..start[1] + spec.size[1],
                start[2]..start[2] + spec.size[2]
            ])
            .to_owned(),
        geom: cropped_geometry(&vol.geom, start),
        channel_names: vol.channel_names.clone(),
    };
    let mask_out = mask.map(|m| {
        SegmentationMask::new(
            m.labels
                .slice(ndarray::s![
                    start[0]..start[0] + spec.size[0],
                    start[1]..start[1] + spec.size[1],
                    start[2]..start[2] + spec.size[2]
                ])
                .to_owned(),
            cropped_geometry(&m.geom, start),
        )
    });
    Ok((img, mask_out))
}

fn cropped_geometry(geom: &Geometry, start: [usize; 3]) -> Geometry {
    let mut g = geom.clone();
    g.origin = geom.index_to_world([start[0] as f64, start[1] as f64, start[2] as f64]);
    g
}

fn uniform_start(dims: [usize; 3], size: [usize; 3], rng: &mut impl Rng) -> [usize; 3] {
    let mut s = [0usize; 3];
    for a in 0..3 {
        s[a] = rng.random_range(0..=dims[a] - size[a]);
    }
    s
}

/// Load, resample to the working spacing, stack DWI+ADC and normalize;
/// records the native DWI geometry so predictions can be taken back.
pub fn preprocess_case(
    record: &CaseRecord,
    cfg: &PreprocessConfig,
) -> Result<(
    MultiChannelVolume,
    Option<SegmentationMask>,
    NativeGeometryRecord,
)> {
    let mut dwi = io::load_volume(&record.dwi)?;
    dwi.modality = Modality::Dwi;
    let mut adc = io::load_volume(&record.adc)?;
    adc.modality = Modality::Adc;

    let native_dims = dwi.dims();
    let native_geom = dwi.geom.clone();

    let mask = match &record.label {
        Some(path) => {
            let m = io::load_mask(path)?;
            if m.dims() != native_dims {
                return Err(Error::Alignment(format!(
                    "case \"{}\": label dims {:?} do not match DWI dims {:?}",
                    record.case_id,
                    m.dims(),
                    native_dims
                )));
            }
            Some(resample_mask(&m, cfg.target_spacing)?)
        }
        None => None,
    };

    let dwi = resample(&dwi, cfg.target_spacing, ResampleMode::Trilinear)?;
    let adc = resample(&adc, cfg.target_spacing, ResampleMode::Trilinear)?;
    let stacked = stack_channels(&[dwi, adc])?;
    let normalized = normalize(&stacked, cfg.norm_region);

    let geometry = NativeGeometryRecord {
        case_id: record.case_id.clone(),
        native_dims,
        native_geom,
        work_dims: normalized.dims(),
        work_geom: normalized.geom.clone(),
    };
    if let Some(m) = &mask {
        if m.dims() != geometry.work_dims {
            return Err(Error::Alignment(format!(
                "case \"{}\": resampled label dims {:?} do not match image dims {:?}",
                record.case_id,
                m.dims(),
                geometry.work_dims
            )));
        }
    }
    Ok((normalized, mask, geometry))
}

/// Check that a crop of `vol` and of a voxel-coordinate volume taken with the
/// same rng state land on identical offsets; used by property tests.
pub fn coordinate_volume(dims: [usize; 3]) -> Array3<f32> {
    let mut arr = Array3::zeros((dims[0], dims[1], dims[2]));
    Zip::indexed(&mut arr).for_each(|(i, j, k), v| {
        *v = (i * dims[1] * dims[2] + j * dims[2] + k) as f32;
    });
    arr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Geometry;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol_from(data: Array3<f32>, spacing: [f64; 3]) -> ImageVolume {
        ImageVolume::new(data, Geometry::identity(spacing), Modality::Dwi)
    }

    fn multi(data: Array4<f32>) -> MultiChannelVolume {
        MultiChannelVolume {
            data,
            geom: Geometry::identity([1.0; 3]),
            channel_names: vec!["DWI".into(), "ADC".into()],
        }
    }

    #[test]
    fn identity_resample_is_bit_identical() {
        let data = Array3::from_shape_fn((7, 5, 9), |(i, j, k)| (i * 100 + j * 10 + k) as f32);
        let vol = vol_from(data.clone(), [1.0; 3]);
        let out = resample(&vol, [1.0; 3], ResampleMode::Trilinear).unwrap();
        assert_eq!(out.data, data);
    }

    #[test]
    fn constant_volume_survives_downsampling() {
        let vol = vol_from(Array3::from_elem((10, 10, 10), 5.0), [2.0; 3]);
        let out = resample(&vol, [1.0; 3], ResampleMode::Trilinear).unwrap();
        assert_eq!(out.dims(), [20, 20, 20]);
        for &v in out.data.iter() {
            assert_abs_diff_eq!(v, 5.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn ramp_matches_analytic_linear_function() {
        // f(x) = x mm along axis 0; input voxel i sits at x = 2i.
        let vol = vol_from(
            Array3::from_shape_fn((16, 4, 4), |(i, _, _)| (i as f32) * 2.0),
            [2.0, 1.0, 1.0],
        );
        let out = resample(&vol, [1.0; 3], ResampleMode::Trilinear).unwrap();
        assert_eq!(out.dims(), [32, 4, 4]);
        // Interior: output voxel i sits at x = i and maps inside the ramp.
        for i in 0..=30 {
            let got = out.data[[i, 2, 2]];
            assert!(
                (got - i as f32).abs() <= 1e-5,
                "voxel {i}: got {got}, want {i}"
            );
        }
    }

    #[test]
    fn nearest_never_invents_values() {
        let mut data = Array3::zeros((6, 6, 6));
        data[[2, 2, 2]] = 7.0;
        let vol = vol_from(data, [1.5, 1.5, 1.5]);
        let out = resample(&vol, [1.0; 3], ResampleMode::Nearest).unwrap();
        for &v in out.data.iter() {
            assert!(v == 0.0 || v == 7.0);
        }
    }

    #[test]
    fn stack_preserves_channels_and_rejects_mismatch() {
        let a = vol_from(Array3::from_elem((4, 4, 4), 1.0), [1.0; 3]);
        let mut b = vol_from(Array3::from_elem((4, 4, 4), 2.0), [1.0; 3]);
        b.modality = Modality::Adc;
        let stacked = stack_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(stacked.channel_names, vec!["DWI", "ADC"]);
        assert_eq!(stacked.channel(0), a.data.view());
        assert_eq!(stacked.channel(1), b.data.view());

        let c = vol_from(Array3::from_elem((4, 4, 5), 2.0), [1.0; 3]);
        match stack_channels(&[a, c]) {
            Err(Error::Alignment(_)) => {}
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn normalize_statistics_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array4::from_shape_fn((2, 8, 8, 8), |_| {
            use rand::Rng;
            rng.random_range(-3.0..9.0f32)
        });
        let out = normalize(&multi(data), NormRegion::All);
        for c in 0..2 {
            let ch = out.channel(c);
            let n = ch.len() as f64;
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-5, "std {}", var.sqrt());
        }
        let twice = normalize(&out, NormRegion::All);
        for (a, b) in out.data.iter().zip(twice.data.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn normalize_constant_channel_becomes_zero() {
        let out = normalize(&multi(Array4::from_elem((2, 4, 4, 4), 3.5)), NormRegion::All);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_two_voxel_symmetry() {
        let mut data = Array4::zeros((1, 2, 1, 1));
        data[[0, 1, 0, 0]] = 2.0;
        let out = normalize(&multi_one(data), NormRegion::All);
        assert_abs_diff_eq!(out.data[[0, 0, 0, 0]], -1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(out.data[[0, 1, 0, 0]], 1.0, epsilon = 1e-6);
    }

    fn multi_one(data: Array4<f32>) -> MultiChannelVolume {
        MultiChannelVolume {
            data,
            geom: Geometry::identity([1.0; 3]),
            channel_names: vec!["DWI".into()],
        }
    }

    #[test]
    fn pad_noop_when_already_large_enough() {
        let vol = multi(Array4::zeros((2, 200, 200, 140)));
        let (out, rec) = pad_to_min(&vol, [192, 192, 128], 0.0);
        assert_eq!(out.dims(), [200, 200, 140]);
        assert!(rec.is_empty());
    }

    #[test]
    fn pad_centers_and_crop_back_inverts() {
        let data = Array4::from_shape_fn((2, 10, 11, 12), |(c, i, j, k)| {
            (c * 10000 + i * 1000 + j * 20 + k) as f32
        });
        let vol = multi(data.clone());
        let (padded, rec) = pad_to_min(&vol, [16, 16, 16], -7.0);
        assert_eq!(padded.dims(), [16, 16, 16]);

        // Symmetric padding, extra voxel on the high side.
        assert_eq!(rec.lo, [3, 2, 2]);
        assert_eq!(padded.data[[0, 0, 0, 0]], -7.0);

        let back = rec.crop_array4(&padded.data);
        assert_eq!(back, data);

        // Geometry still places original voxels at the same world positions.
        let world_before = vol.geom.index_to_world([0.0, 0.0, 0.0]);
        let world_after = padded.geom.index_to_world([3.0, 2.0, 2.0]);
        for a in 0..3 {
            assert_abs_diff_eq!(world_before[a], world_after[a], epsilon = 1e-9);
        }
    }

    #[test]
    fn identity_crop_returns_whole_volume() {
        let vol = multi(Array4::from_shape_fn((2, 6, 6, 6), |(c, i, j, k)| {
            (c + i + j + k) as f32
        }));
        let spec = CropSpec {
            size: [6, 6, 6],
            foreground_bias: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (crop, _) = sample_crop(&vol, None, &spec, &mut rng).unwrap();
        assert_eq!(crop.data, vol.data);
    }

    #[test]
    fn biased_crop_always_contains_the_foreground_voxel() {
        let vol = multi(Array4::zeros((2, 24, 24, 24)));
        let mut labels = Array3::zeros((24, 24, 24));
        labels[[20, 3, 11]] = 1;
        let mask = SegmentationMask::new(labels, vol.geom.clone());
        let spec = CropSpec {
            size: [8, 8, 8],
            foreground_bias: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..1000 {
            let (_, m) = sample_crop(&vol, Some(&mask), &spec, &mut rng).unwrap();
            assert_eq!(
                m.unwrap().foreground_count(),
                1,
                "trial {trial} lost the foreground voxel"
            );
        }
    }

    #[test]
    fn empty_mask_falls_back_to_uniform_and_stays_in_range() {
        let vol = multi(Array4::zeros((2, 16, 12, 10)));
        let mask = SegmentationMask::new(Array3::zeros((16, 12, 10)), vol.geom.clone());
        let spec = CropSpec {
            size: [8, 8, 8],
            foreground_bias: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let (img, m) = sample_crop(&vol, Some(&mask), &spec, &mut rng).unwrap();
            assert_eq!(img.dims(), [8, 8, 8]);
            assert_eq!(m.unwrap().dims(), [8, 8, 8]);
        }
    }

    #[test]
    fn crop_smaller_than_spec_errors() {
        let vol = multi(Array4::zeros((2, 4, 4, 4)));
        let spec = CropSpec {
            size: [8, 8, 8],
            foreground_bias: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(sample_crop(&vol, None, &spec, &mut rng).is_err());
    }

    #[test]
    fn image_and_mask_crop_with_identical_offsets() {
        // Crop a coordinate volume as both image and mask payload; equal
        // values prove equal offsets.
        let dims = [20, 18, 16];
        let coords = coordinate_volume(dims);
        let mut data = Array4::zeros((1, dims[0], dims[1], dims[2]));
        data.index_axis_mut(Axis(0), 0).assign(&coords);
        let vol = multi_one(data);
        let labels = coords.mapv(|v| (v as usize % 7 == 0) as u8);
        let mask = SegmentationMask::new(labels, vol.geom.clone());
        let spec = CropSpec {
            size: [6, 6, 6],
            foreground_bias: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..50 {
            let (img, m) = sample_crop(&vol, Some(&mask), &spec, &mut rng).unwrap();
            let m = m.unwrap();
            for ((i, j, k), &v) in img.channel(0).indexed_iter() {
                let expect = (v as usize % 7 == 0) as u8;
                assert_eq!(m.labels[[i, j, k]], expect);
            }
        }
    }

    #[test]
    fn preprocess_case_resamples_to_unit_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let dims = (10, 12, 14);
        let dwi = vol_from(
            Array3::from_shape_fn(dims, |(i, j, k)| (i + j + k) as f32),
            [2.0, 2.0, 2.0],
        );
        let mut adc = dwi.clone();
        adc.modality = Modality::Adc;
        let mut labels = Array3::zeros(dims);
        labels[[5, 6, 7]] = 1;
        let mask = SegmentationMask::new(labels, dwi.geom.clone());

        let dwi_path = dir.path().join("dwi.nii.gz");
        let adc_path = dir.path().join("adc.nii.gz");
        let lbl_path = dir.path().join("lbl.nii.gz");
        crate::io::save_volume(&dwi, &dwi_path).unwrap();
        crate::io::save_volume(&adc, &adc_path).unwrap();
        crate::io::save_mask(&mask, &lbl_path).unwrap();

        let record = CaseRecord {
            case_id: "t0".into(),
            dwi: dwi_path,
            adc: adc_path,
            flair: None,
            label: Some(lbl_path),
        };
        let (img, m, geo) = preprocess_case(&record, &PreprocessConfig::default()).unwrap();
        assert_eq!(img.geom.spacing, [1.0, 1.0, 1.0]);
        assert_eq!(img.dims(), [20, 24, 28]);
        assert_eq!(img.channels(), 2);
        assert_eq!(img.channel_names, vec!["DWI", "ADC"]);
        assert!(m.unwrap().foreground_count() > 0);
        assert_eq!(geo.native_dims, [10, 12, 14]);
        assert_eq!(geo.native_geom.spacing, [2.0, 2.0, 2.0]);
    }

    #[test]
    fn preprocess_case_without_label_returns_no_mask() {
        let dir = tempfile::tempdir().unwrap();
        let dwi = vol_from(Array3::zeros((8, 8, 8)), [1.0; 3]);
        let dwi_path = dir.path().join("dwi.nii");
        let adc_path = dir.path().join("adc.nii");
        crate::io::save_volume(&dwi, &dwi_path).unwrap();
        crate::io::save_volume(&dwi, &adc_path).unwrap();
        let record = CaseRecord {
            case_id: "u0".into(),
            dwi: dwi_path,
            adc: adc_path,
            flair: None,
            label: None,
        };
        let (_, m, _) = preprocess_case(&record, &PreprocessConfig::default()).unwrap();
        assert!(m.is_none());
    }
}
