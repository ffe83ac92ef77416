//! Combined soft-Dice + focal loss with a deep-supervision pyramid: the same
//! loss is evaluated against nearest-neighbor-downsized targets at every
//! decoder output scale and the terms are weighted 1/2^i, coarser levels
//! contributing less. Weights are not renormalized.
//!
//! Loss values are plain f64; gradients come back in the network's element
//! type through `deep_supervision_grad`.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Probabilities are clamped to [EPS, 1-EPS] inside the focal log.
pub const FOCAL_PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    pub include_background: bool,
    /// Total deep-supervision terms (full resolution included).
    pub num_ds_levels: usize,
    /// Joint batch reduction for the Dice sums; per-sample when false.
    pub dice_batch: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_gamma: 2.0,
            dice_smooth: 1e-5,
            include_background: false,
            num_ds_levels: 4,
            dice_batch: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.focal_gamma < 0.0 {
            return Err(Error::Config("focal_gamma must be >= 0".into()));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config("dice_smooth must be > 0".into()));
        }
        if self.num_ds_levels == 0 {
            return Err(Error::Config("num_ds_levels must be >= 1".into()));
        }
        Ok(())
    }

    /// Deep-supervision weight of level i.
    pub fn level_weight(&self, level: usize) -> f64 {
        0.5f64.powi(level as i32)
    }

    fn class_range(&self, channels: usize) -> std::ops::Range<usize> {
        if self.include_background {
            0..channels
        } else {
            1..channels
        }
    }
}

/// Channel-axis softmax, numerically stabilized.
pub fn softmax<T: Scalar>(logits: &Array4<T>) -> Array4<T> {
    let (c, d0, d1, d2) = logits.dim();
    let mut out = logits.clone();
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(out[[ch, i, j, k]].as_f64());
                }
                let mut sum = 0.0;
                for ch in 0..c {
                    let e = (out[[ch, i, j, k]].as_f64() - max).exp();
                    out[[ch, i, j, k]] = T::of_f64(e);
                    sum += e;
                }
                for ch in 0..c {
                    out[[ch, i, j, k]] = T::of_f64(out[[ch, i, j, k]].as_f64() / sum);
                }
            }
        }
    }
    out
}

fn check_pair<T: Scalar>(probs: &Array4<T>, target: &Array3<u8>) -> Result<()> {
    let (c, d0, d1, d2) = probs.dim();
    if target.dim() != (d0, d1, d2) {
        return Err(Error::Shape(format!(
            "probability dims {:?} do not match target dims {:?}",
            (d0, d1, d2),
            target.dim()
        )));
    }
    if target.iter().any(|&t| t as usize >= c) {
        return Err(Error::Shape(format!(
            "target contains labels outside [0, {c})"
        )));
    }
    Ok(())
}

/// 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), averaged over the included
/// classes; sums run jointly over the batch when `dice_batch` is set.
/// Lesion-free targets with crisp-empty predictions give exactly 0.
pub fn soft_dice_loss<T: Scalar>(
    probs: &[Array4<T>],
    targets: &[Array3<u8>],
    cfg: &LossConfig,
) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::Shape("batch sizes differ or are empty".into()));
    }
    for (p, t) in probs.iter().zip(targets) {
        check_pair(p, t)?;
    }
    let channels = probs[0].dim().0;
    let classes = cfg.class_range(channels);
    let s = cfg.dice_smooth;

    let dice_of = |num: f64, den: f64| 1.0 - (2.0 * num + s) / (den + s);
    let mut total = 0.0;
    let mut terms = 0usize;
    for c in classes {
        if cfg.dice_batch {
            let mut num = 0.0;
            let mut den = 0.0;
            for (p, t) in probs.iter().zip(targets) {
                let (n, d) = dice_sums(p, t, c);
                num += n;
                den += d;
            }
            total += dice_of(num, den);
            terms += 1;
        } else {
            for (p, t) in probs.iter().zip(targets) {
                let (n, d) = dice_sums(p, t, c);
                total += dice_of(n, d);
                terms += 1;
            }
        }
    }
    Ok(if terms == 0 { 0.0 } else { total / terms as f64 })
}

/// (sum p*t, sum p + sum t) for one class of one sample.
fn dice_sums<T: Scalar>(probs: &Array4<T>, target: &Array3<u8>, class: usize) -> (f64, f64) {
    let p = probs.index_axis(Axis(0), class);
    let mut num = 0.0;
    let mut den = 0.0;
    for (&pv, &tv) in p.iter().zip(target.iter()) {
        let pv = pv.as_f64();
        let tv = (tv as usize == class) as u8 as f64;
        num += pv * tv;
        den += pv + tv;
    }
    (num, den)
}

/// Mean over voxels of -(1-p_t)^gamma * log(p_t), with p_t the probability
/// assigned to the true class, clamped away from 0 and 1. gamma = 0 is plain
/// cross-entropy.
pub fn focal_loss<T: Scalar>(
    probs: &[Array4<T>],
    targets: &[Array3<u8>],
    cfg: &LossConfig,
) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::Shape("batch sizes differ or are empty".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in probs.iter().zip(targets) {
        check_pair(p, t)?;
        for ((i, j, k), &tv) in t.indexed_iter() {
            let pt = p[[tv as usize, i, j, k]]
                .as_f64()
                .clamp(FOCAL_PROB_CLAMP, 1.0 - FOCAL_PROB_CLAMP);
            sum += -(1.0 - pt).powf(cfg.focal_gamma) * pt.ln();
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Nearest-neighbor label downsizing: plain index striding.
pub fn downsize_target(target: &Array3<u8>, factor: usize) -> Result<Array3<u8>> {
    if factor == 0 {
        return Err(Error::Shape("downsize factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(target.clone());
    }
    let (d0, d1, d2) = target.dim();
    for (axis, d) in [d0, d1, d2].into_iter().enumerate() {
        if d % factor != 0 {
            return Err(Error::Shape(format!(
                "target axis {axis} (dim {d}) not divisible by {factor}"
            )));
        }
    }
    Ok(Array3::from_shape_fn(
        (d0 / factor, d1 / factor, d2 / factor),
        |(i, j, k)| target[[i * factor, j * factor, k * factor]],
    ))
}

/// Dice + focal (unit coefficients) on softmax(logits) for one level.
fn combined_level_loss<T: Scalar>(
    logits: &[&Array4<T>],
    targets: &[&Array3<u8>],
    cfg: &LossConfig,
) -> Result<f64> {
    let probs: Vec<Array4<T>> = logits.iter().map(|l| softmax(l)).collect();
    let towned: Vec<Array3<u8>> = targets.iter().map(|t| (*t).clone()).collect();
    Ok(soft_dice_loss(&probs, &towned, cfg)? + focal_loss(&probs, &towned, cfg)?)
}

/// Deep-supervision pyramid for one sample: outputs[i] holds logits at scale
/// 1/2^i; the target is downsized to match each level.
pub fn deep_supervision_loss<T: Scalar>(
    outputs: &[Array4<T>],
    target: &Array3<u8>,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    if outputs.len() != cfg.num_ds_levels {
        return Err(Error::Shape(format!(
            "expected {} deep-supervision levels, got {}",
            cfg.num_ds_levels,
            outputs.len()
        )));
    }
    let mut total = 0.0;
    for (i, logits) in outputs.iter().enumerate() {
        let t = downsize_target(target, 1 << i)?;
        let (c, d0, d1, d2) = logits.dim();
        let _ = c;
        if t.dim() != (d0, d1, d2) {
            return Err(Error::Shape(format!(
                "level {i}: logit dims {:?} do not match downsized target {:?}",
                (d0, d1, d2),
                t.dim()
            )));
        }
        total += cfg.level_weight(i) * combined_level_loss(&[logits], &[&t], cfg)?;
    }
    Ok(total)
}

/// Loss and analytic gradients for a micro-batch: `outputs[s][i]` holds the
/// level-i logits of sample s. Returns the scalar loss and matching
/// gradient arrays.
pub fn deep_supervision_grad<T: Scalar>(
    outputs: &[Vec<Array4<T>>],
    targets: &[Array3<u8>],
    cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<Array4<T>>>)> {
    cfg.validate()?;
    if outputs.len() != targets.len() || outputs.is_empty() {
        return Err(Error::Shape("batch sizes differ or are empty".into()));
    }
    for o in outputs {
        if o.len() != cfg.num_ds_levels {
            return Err(Error::Shape(format!(
                "expected {} deep-supervision levels, got {}",
                cfg.num_ds_levels,
                o.len()
            )));
        }
    }
    let batch = outputs.len();
    let mut total = 0.0;
    let mut grads: Vec<Vec<Array4<T>>> = (0..batch).map(|_| Vec::new()).collect();
    for level in 0..cfg.num_ds_levels {
        let weight = cfg.level_weight(level);
        let level_targets: Vec<Array3<u8>> = targets
            .iter()
            .map(|t| downsize_target(t, 1 << level))
            .collect::<Result<_>>()?;
        let level_logits: Vec<&Array4<T>> = outputs.iter().map(|o| &o[level]).collect();
        for (l, t) in level_logits.iter().zip(&level_targets) {
            let (_, d0, d1, d2) = l.dim();
            if t.dim() != (d0, d1, d2) {
                return Err(Error::Shape(format!(
                    "level {level}: logit dims {:?} do not match downsized target {:?}",
                    (d0, d1, d2),
                    t.dim()
                )));
            }
        }
        let (value, level_grads) = combined_grad(&level_logits, &level_targets, cfg)?;
        total += weight * value;
        for (s, g) in level_grads.into_iter().enumerate() {
            grads[s].push(g.mapv(|v| T::of_f64(v.as_f64() * weight)));
        }
    }
    Ok((total, grads))
}

/// Value and d(loss)/d(logits) of dice+focal on softmax(logits) for one
/// level of a micro-batch.
fn combined_grad<T: Scalar>(
    logits: &[&Array4<T>],
    targets: &[Array3<u8>],
    cfg: &LossConfig,
) -> Result<(f64, Vec<Array4<T>>)> {
    let batch = logits.len();
    let probs: Vec<Array4<T>> = logits.iter().map(|l| softmax(l)).collect();
    for (p, t) in probs.iter().zip(targets) {
        check_pair(p, t)?;
    }
    let channels = probs[0].dim().0;
    let classes: Vec<usize> = cfg.class_range(channels).collect();
    let s = cfg.dice_smooth;

    // Dice sums per class: groups of samples reduced jointly or separately.
    // For each (class, sample) keep the group sums it belongs to.
    let mut num = vec![vec![0.0f64; batch]; channels];
    let mut den = vec![vec![0.0f64; batch]; channels];
    for &c in &classes {
        for (si, (p, t)) in probs.iter().zip(targets).enumerate() {
            let (n, d) = dice_sums(p, t, c);
            num[c][si] = n;
            den[c][si] = d;
        }
    }
    let terms = classes.len() * if cfg.dice_batch { 1 } else { batch };
    let mut dice_value = 0.0;
    for &c in &classes {
        if cfg.dice_batch {
            let n: f64 = num[c].iter().sum();
            let d: f64 = den[c].iter().sum();
            dice_value += 1.0 - (2.0 * n + s) / (d + s);
        } else {
            for si in 0..batch {
                dice_value += 1.0 - (2.0 * num[c][si] + s) / (den[c][si] + s);
            }
        }
    }
    if terms > 0 {
        dice_value /= terms as f64;
    }

    let total_voxels: usize = targets.iter().map(|t| t.len()).sum();
    let mut focal_value = 0.0;

    let mut grads = Vec::with_capacity(batch);
    for (si, (p, t)) in probs.iter().zip(targets).enumerate() {
        let (c, d0, d1, d2) = p.dim();
        let mut g = Array4::<T>::zeros((c, d0, d1, d2));
        let mut gp = vec![0.0f64; c];
        let mut pv = vec![0.0f64; c];
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    for ch in 0..c {
                        pv[ch] = p[[ch, i, j, k]].as_f64();
                        gp[ch] = 0.0;
                    }
                    let tv = t[[i, j, k]] as usize;

                    // focal term, mean over all batch voxels
                    let pt = pv[tv];
                    if (FOCAL_PROB_CLAMP..=1.0 - FOCAL_PROB_CLAMP).contains(&pt) {
                        let one_m = 1.0 - pt;
                        let gamma = cfg.focal_gamma;
                        let dfd_pt = if gamma == 0.0 {
                            -1.0 / pt
                        } else {
                            gamma * one_m.powf(gamma - 1.0) * pt.ln() - one_m.powf(gamma) / pt
                        };
                        gp[tv] += dfd_pt / total_voxels as f64;
                    }
                    let ptc = pt.clamp(FOCAL_PROB_CLAMP, 1.0 - FOCAL_PROB_CLAMP);
                    focal_value += -(1.0 - ptc).powf(cfg.focal_gamma) * ptc.ln();

                    // dice term
                    for &cl in &classes {
                        let (n, d) = if cfg.dice_batch {
                            (num[cl].iter().sum::<f64>(), den[cl].iter().sum::<f64>())
                        } else {
                            (num[cl][si], den[cl][si])
                        };
                        let a = 2.0 * n + s;
                        let b = d + s;
                        let tcl = (tv == cl) as u8 as f64;
                        // d/dp of -(a/b) with a,b linear in p
                        let dd = -(2.0 * tcl * b - a) / (b * b);
                        gp[cl] += dd / terms as f64;
                    }

                    // chain through softmax: g_z = p .* (g_p - <g_p, p>)
                    let dot: f64 = gp.iter().zip(&pv).map(|(a, b)| a * b).sum();
                    for ch in 0..c {
                        g[[ch, i, j, k]] = T::of_f64(pv[ch] * (gp[ch] - dot));
                    }
                }
            }
        }
        grads.push(g);
    }
    focal_value /= total_voxels as f64;
    Ok((dice_value + focal_value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot_probs(target: &Array3<u8>, confidence: f64) -> Array4<f64> {
        let (d0, d1, d2) = target.dim();
        let mut p = Array4::from_elem((2, d0, d1, d2), 1.0 - confidence);
        for ((i, j, k), &t) in target.indexed_iter() {
            p[[t as usize, i, j, k]] = confidence;
        }
        p
    }

    #[test]
    fn perfect_prediction_has_near_zero_dice_loss() {
        let mut t = Array3::<u8>::zeros((4, 4, 4));
        t[[1, 2, 3]] = 1;
        t[[2, 2, 2]] = 1;
        let p = one_hot_probs(&t, 1.0);
        let loss = soft_dice_loss(&[p], &[t], &LossConfig::default()).unwrap();
        assert!(loss <= 1e-4, "loss {loss}");
    }

    #[test]
    fn empty_empty_dice_is_exactly_zero() {
        let t = Array3::<u8>::zeros((4, 4, 4));
        let p = one_hot_probs(&t, 1.0); // crisp-empty foreground
        let loss = soft_dice_loss(&[p], &[t], &LossConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn half_probability_full_target_matches_formula() {
        // p = 0.5 everywhere on the foreground channel, target all ones.
        let t = Array3::<u8>::ones((2, 2, 2));
        let p = Array4::from_elem((2, 2, 2, 2), 0.5);
        let cfg = LossConfig::default();
        let loss = soft_dice_loss(&[p], &[t.clone()], &cfg).unwrap();
        // Independent evaluation of the stated formula.
        let n = t.len() as f64;
        let (sum_pt, sum_p, sum_t) = (0.5 * n, 0.5 * n, n);
        let expect = 1.0 - (2.0 * sum_pt + cfg.dice_smooth) / (sum_p + sum_t + cfg.dice_smooth);
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 1.0 / 3.0, epsilon = 1e-3);
    }

    #[test]
    fn focal_confident_correct_is_near_zero() {
        let mut t = Array3::<u8>::zeros((3, 3, 3));
        t[[0, 0, 0]] = 1;
        let p = one_hot_probs(&t, 1.0 - 1e-9);
        let loss = focal_loss(&[p], &[t], &LossConfig::default()).unwrap();
        assert!(loss <= 1e-6, "loss {loss}");
    }

    #[test]
    fn focal_gamma_zero_on_uniform_probs_is_ln2() {
        let t = Array3::<u8>::zeros((4, 4, 4));
        let p = Array4::from_elem((2, 4, 4, 4), 0.5);
        let cfg = LossConfig {
            focal_gamma: 0.0,
            ..LossConfig::default()
        };
        let loss = focal_loss(&[p], &[t], &cfg).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-6);
    }

    #[test]
    fn focal_single_voxel_half_probability() {
        let t = Array3::<u8>::zeros((1, 1, 1));
        let p = Array4::from_elem((2, 1, 1, 1), 0.5);
        let loss = focal_loss(&[p], &[t], &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(loss, 0.25 * std::f64::consts::LN_2, epsilon = 1e-4);
    }

    #[test]
    fn downsize_is_index_striding() {
        let t = Array3::from_shape_fn((4, 4, 4), |(i, j, k)| ((i + j + k) % 2) as u8);
        assert_eq!(downsize_target(&t, 1).unwrap(), t);
        let d = downsize_target(&t, 2).unwrap();
        assert_eq!(d.dim(), (2, 2, 2));
        for ((i, j, k), &v) in d.indexed_iter() {
            assert_eq!(v, t[[2 * i, 2 * j, 2 * k]]);
        }
        let ones = Array3::<u8>::ones((4, 4, 4));
        assert!(downsize_target(&ones, 2).unwrap().iter().all(|&v| v == 1));
        assert!(downsize_target(&t, 3).is_err());
    }

    #[test]
    fn single_level_equals_base_combined_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = Array4::from_shape_simple_fn((2, 4, 4, 4), || rng.random_range(-2.0..2.0f64));
        let t = Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(0..2u32) as u8);
        let cfg = LossConfig {
            num_ds_levels: 1,
            ..LossConfig::default()
        };
        let ds = deep_supervision_loss(&[logits.clone()], &t, &cfg).unwrap();
        let p = softmax(&logits);
        let base = soft_dice_loss(&[p.clone()], &[t.clone()], &cfg).unwrap()
            + focal_loss(&[p], &[t], &cfg).unwrap();
        assert_abs_diff_eq!(ds, base, epsilon = 1e-12);
    }

    #[test]
    fn equal_level_losses_sum_to_1_875x() {
        // All-zero logits + all-ones targets give the same per-level loss at
        // every scale; the pyramid must weight them 1, 1/2, 1/4, 1/8.
        let cfg = LossConfig {
            dice_smooth: 1e-12,
            ..LossConfig::default()
        };
        let outputs: Vec<Array4<f64>> = (0..4)
            .map(|i| Array4::zeros((2, 8 >> i, 8 >> i, 8 >> i)))
            .collect();
        let target = Array3::<u8>::ones((8, 8, 8));
        let single = LossConfig {
            num_ds_levels: 1,
            ..cfg.clone()
        };
        let base = deep_supervision_loss(&outputs[..1], &target, &single).unwrap();
        let total = deep_supervision_loss(&outputs, &target, &cfg).unwrap();
        assert_abs_diff_eq!(total, 1.875 * base, epsilon = 1e-9);
    }

    #[test]
    fn level_weights_follow_the_halving_schedule() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.level_weight(0), 1.0);
        assert_eq!(cfg.level_weight(1), 0.5);
        assert_eq!(cfg.level_weight(2), 0.25);
        assert_eq!(cfg.level_weight(3), 0.125);
    }

    #[test]
    fn level_count_mismatch_is_an_error() {
        let outputs: Vec<Array4<f64>> = vec![Array4::zeros((2, 4, 4, 4))];
        let target = Array3::<u8>::zeros((4, 4, 4));
        assert!(deep_supervision_loss(&outputs, &target, &LossConfig::default()).is_err());
    }

    #[test]
    fn lesion_free_target_keeps_the_loss_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let outputs: Vec<Array4<f64>> = (0..4)
            .map(|i| {
                Array4::from_shape_simple_fn((2, 8 >> i, 8 >> i, 8 >> i), || {
                    rng.random_range(-3.0..3.0f64)
                })
            })
            .collect();
        let target = Array3::<u8>::zeros((8, 8, 8));
        let loss = deep_supervision_loss(&outputs, &target, &LossConfig::default()).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn increasing_true_class_probability_never_increases_focal() {
        let cfg = LossConfig::default();
        let t = Array3::<u8>::ones((1, 1, 1));
        let mut last = f64::INFINITY;
        for step in 1..100 {
            let pt = step as f64 / 100.0;
            let mut p = Array4::zeros((2, 1, 1, 1));
            p[[1, 0, 0, 0]] = pt;
            p[[0, 0, 0, 0]] = 1.0 - pt;
            let loss = focal_loss(&[p], &[t.clone()], &cfg).unwrap();
            assert!(loss <= last + 1e-12, "focal not monotone at p_t={pt}");
            last = loss;
        }
    }

    #[test]
    fn dice_stays_in_unit_interval_and_focal_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = LossConfig::default();
        for _ in 0..50 {
            let logits =
                Array4::from_shape_simple_fn((2, 4, 4, 4), || rng.random_range(-5.0..5.0f64));
            let t = Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(0..2u32) as u8);
            let p = softmax(&logits);
            let d = soft_dice_loss(&[p.clone()], &[t.clone()], &cfg).unwrap();
            let f = focal_loss(&[p], &[t], &cfg).unwrap();
            assert!((0.0..=1.0).contains(&d));
            assert!(f >= 0.0);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let cfg = LossConfig::default();
        let outputs: Vec<Vec<Array4<f64>>> = vec![(0..4)
            .map(|i| {
                Array4::from_shape_simple_fn((2, 8 >> i, 8 >> i, 8 >> i), || {
                    rng.random_range(-2.0..2.0f64)
                })
            })
            .collect()];
        let targets = vec![Array3::from_shape_fn((8, 8, 8), |_| {
            rng.random_range(0..2u32) as u8
        })];

        let (loss, grads) = deep_supervision_grad(&outputs, &targets, &cfg).unwrap();
        let base = deep_supervision_loss(&outputs[0], &targets[0], &cfg).unwrap();
        assert_abs_diff_eq!(loss, base, epsilon = 1e-12);

        let h = 1e-6;
        let mut max_rel = 0.0f64;
        let mut probe = ChaCha8Rng::seed_from_u64(7);
        for level in 0..4 {
            let mut pert = outputs.clone();
            let n = pert[0][level].len();
            for _ in 0..6 {
                let flat = probe.random_range(0..n);
                let idx = flat_index(pert[0][level].dim(), flat);
                let orig = pert[0][level][idx];
                pert[0][level][idx] = orig + h;
                let up = deep_supervision_loss(&pert[0], &targets[0], &cfg).unwrap();
                pert[0][level][idx] = orig - h;
                let dn = deep_supervision_loss(&pert[0], &targets[0], &cfg).unwrap();
                pert[0][level][idx] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grads[0][level][idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
                assert!(
                    rel < 1e-4,
                    "level {level} {idx:?}: fd {fd:.6e} vs {an:.6e} (rel {rel:.1e})"
                );
            }
        }
        println!("max relative loss-gradient error: {max_rel:.2e}");
    }

    fn flat_index(dim: (usize, usize, usize, usize), flat: usize) -> [usize; 4] {
        let (c, d0, d1, d2) = dim;
        let _ = c;
        let ch = flat / (d0 * d1 * d2);
        let r = flat % (d0 * d1 * d2);
        [ch, r / (d1 * d2), (r / d2) % d1, r % d2]
    }

    #[test]
    fn batch_dice_couples_samples_only_when_enabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let p1 = softmax(&Array4::from_shape_simple_fn((2, 4, 4, 4), || {
            rng.random_range(-1.0..1.0f64)
        }));
        let p2 = softmax(&Array4::from_shape_simple_fn((2, 4, 4, 4), || {
            rng.random_range(-1.0..1.0f64)
        }));
        let t1 = Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(0..2u32) as u8);
        let t2 = Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(0..2u32) as u8);
        let joint = LossConfig::default();
        let per = LossConfig {
            dice_batch: false,
            ..LossConfig::default()
        };
        let batch =
            soft_dice_loss(&[p1.clone(), p2.clone()], &[t1.clone(), t2.clone()], &per).unwrap();
        let mean = (soft_dice_loss(&[p1.clone()], &[t1.clone()], &per).unwrap()
            + soft_dice_loss(&[p2.clone()], &[t2.clone()], &per).unwrap())
            / 2.0;
        assert_abs_diff_eq!(batch, mean, epsilon = 1e-12);
        let joint_loss = soft_dice_loss(&[p1, p2], &[t1, t2], &joint).unwrap();
        assert!((joint_loss - mean).abs() > 1e-9, "joint reduction must differ");
    }
}
