//! Lesion segmentation evaluation: voxel Dice, lesion-wise F1 over connected
//! components, absolute volume difference in milliliters and lesion count
//! difference, plus per-dataset report assembly.
//!
//! Metrics are computed in native label space, never in the resampled
//! working space.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, DatasetManifest};
use crate::volume::SegmentationMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "18")]
    Eighteen,
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let dist = dz.abs() + dy.abs() + dx.abs();
                    if dist == 0 {
                        continue;
                    }
                    let keep = match self {
                        Connectivity::Six => dist == 1,
                        Connectivity::Eighteen => dist <= 2,
                        Connectivity::TwentySix => true,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

impl std::str::FromStr for Connectivity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "6" => Ok(Connectivity::Six),
            "18" => Ok(Connectivity::Eighteen),
            "26" => Ok(Connectivity::TwentySix),
            other => Err(Error::Config(format!(
                "connectivity must be 6, 18 or 26, got {other}"
            ))),
        }
    }
}

/// How a ground-truth lesion is matched against predicted lesions for the
/// lesion-wise F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LesionMatching {
    /// A GT lesion counts as detected if any predicted voxel overlaps it; a
    /// predicted lesion is a false positive if it overlaps nothing.
    #[default]
    AnyOverlap,
    /// Greedy one-to-one assignment by descending overlap.
    OneToOne,
}

#[derive(Debug, Clone)]
pub struct LabeledComponents {
    /// 0 = background, components numbered 1..=n in lexicographic-scan
    /// order of their first voxel.
    pub component_map: Array3<u32>,
    pub n: usize,
    pub voxel_counts: Vec<usize>,
    pub connectivity: Connectivity,
}

/// Breadth-first labeling in scan order.
pub fn connected_components(mask: &Array3<u8>, connectivity: Connectivity) -> LabeledComponents {
    let dims = mask.dim();
    let offsets = connectivity.offsets();
    let mut map = Array3::<u32>::zeros(dims);
    let mut counts = Vec::new();
    let mut queue = VecDeque::new();
    let mut next = 0u32;
    for ((i, j, k), &v) in mask.indexed_iter() {
        if v == 0 || map[[i, j, k]] != 0 {
            continue;
        }
        next += 1;
        let mut size = 0usize;
        map[[i, j, k]] = next;
        queue.push_back([i, j, k]);
        while let Some([ci, cj, ck]) = queue.pop_front() {
            size += 1;
            for off in &offsets {
                let ni = ci as isize + off[0];
                let nj = cj as isize + off[1];
                let nk = ck as isize + off[2];
                if ni < 0 || nj < 0 || nk < 0 {
                    continue;
                }
                let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                if ni >= dims.0 || nj >= dims.1 || nk >= dims.2 {
                    continue;
                }
                if mask[[ni, nj, nk]] != 0 && map[[ni, nj, nk]] == 0 {
                    map[[ni, nj, nk]] = next;
                    queue.push_back([ni, nj, nk]);
                }
            }
        }
        counts.push(size);
    }
    LabeledComponents {
        component_map: map,
        n: next as usize,
        voxel_counts: counts,
        connectivity,
    }
}

fn check_aligned(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Alignment(format!(
            "prediction dims {:?} do not match ground truth dims {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    if !pred.geom.approx_eq(&gt.geom, 1e-3) {
        return Err(Error::Alignment(
            "prediction and ground truth geometries differ".into(),
        ));
    }
    Ok(())
}

/// 2|P intersect G| / (|P| + |G|); 1.0 when both masks are empty.
pub fn dice_score(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    check_aligned(pred, gt)?;
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.labels.iter().zip(gt.labels.iter()) {
        p += (a == 1) as usize;
        g += (b == 1) as usize;
        inter += (a == 1 && b == 1) as usize;
    }
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    })
}

/// Lesion-detection F1 = 2TP / (2TP + FP + FN) over connected components;
/// 1.0 when both volumes are lesion-free.
pub fn lesion_f1(
    pred: &SegmentationMask,
    gt: &SegmentationMask,
    connectivity: Connectivity,
    matching: LesionMatching,
) -> Result<f64> {
    check_aligned(pred, gt)?;
    let pc = connected_components(&pred.labels, connectivity);
    let gc = connected_components(&gt.labels, connectivity);
    if pc.n == 0 && gc.n == 0 {
        return Ok(1.0);
    }
    // overlap[g][p] = shared voxels between gt component g+1 and pred p+1
    let mut overlap = vec![vec![0usize; pc.n]; gc.n];
    for (&pl, &gl) in pc.component_map.iter().zip(gc.component_map.iter()) {
        if pl != 0 && gl != 0 {
            overlap[gl as usize - 1][pl as usize - 1] += 1;
        }
    }
    let (tp, fp, fn_) = match matching {
        LesionMatching::AnyOverlap => {
            let tp = overlap.iter().filter(|row| row.iter().any(|&o| o > 0)).count();
            let fn_ = gc.n - tp;
            let fp = (0..pc.n)
                .filter(|&p| overlap.iter().all(|row| row[p] == 0))
                .count();
            (tp, fp, fn_)
        }
        LesionMatching::OneToOne => {
            let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
            for (g, row) in overlap.iter().enumerate() {
                for (p, &o) in row.iter().enumerate() {
                    if o > 0 {
                        pairs.push((o, g, p));
                    }
                }
            }
            pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut g_used = vec![false; gc.n];
            let mut p_used = vec![false; pc.n];
            let mut tp = 0usize;
            for (_, g, p) in pairs {
                if !g_used[g] && !p_used[p] {
                    g_used[g] = true;
                    p_used[p] = true;
                    tp += 1;
                }
            }
            (tp, pc.n - tp, gc.n - tp)
        }
    };
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64))
}

/// | |P| - |G| | * voxel volume, in milliliters (1000 mm^3 = 1 ml).
pub fn abs_volume_difference(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    check_aligned(pred, gt)?;
    let p = pred.foreground_count() as f64;
    let g = gt.foreground_count() as f64;
    let voxel_mm3: f64 = pred.geom.spacing.iter().product();
    Ok((p - g).abs() * voxel_mm3 / 1000.0)
}

/// |n_components(pred) - n_components(gt)|
pub fn lesion_count_difference(
    pred: &SegmentationMask,
    gt: &SegmentationMask,
    connectivity: Connectivity,
) -> Result<u64> {
    check_aligned(pred, gt)?;
    let p = connected_components(&pred.labels, connectivity).n as i64;
    let g = connected_components(&gt.labels, connectivity).n as i64;
    Ok((p - g).unsigned_abs())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub lesion_f1: f64,
    pub avd_ml: f64,
    pub lesion_count_diff: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub mean_dice: f64,
    pub mean_lesion_f1: f64,
    pub mean_avd_ml: f64,
    pub mean_lesion_count_diff: f64,
    pub missing: Vec<String>,
}

impl MetricsReport {
    fn from_rows(mut cases: Vec<CaseMetrics>, missing: Vec<String>) -> MetricsReport {
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let n = cases.len().max(1) as f64;
        MetricsReport {
            mean_dice: cases.iter().map(|c| c.dice).sum::<f64>() / n,
            mean_lesion_f1: cases.iter().map(|c| c.lesion_f1).sum::<f64>() / n,
            mean_avd_ml: cases.iter().map(|c| c.avd_ml).sum::<f64>() / n,
            mean_lesion_count_diff: cases.iter().map(|c| c.lesion_count_diff as f64).sum::<f64>()
                / n,
            cases,
            missing,
        }
    }

    /// Delimited per-case table; column names are part of the contract.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,dice,lesion_f1,avd_ml,lesion_count_diff\n");
        for c in &self.cases {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{}\n",
                c.case_id, c.dice, c.lesion_f1, c.avd_ml, c.lesion_count_diff
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{:.3}\n",
            self.mean_dice, self.mean_lesion_f1, self.mean_avd_ml, self.mean_lesion_count_diff
        ));
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("metrics.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Evaluation(format!("report serialization: {e}")))?;
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}

pub fn prediction_path(pred_dir: &Path, case_id: &str) -> Option<PathBuf> {
    for ext in ["nii.gz", "nii"] {
        let p = pred_dir.join(format!("{case_id}.{ext}"));
        if p.exists() {
            return Some(p);
        }
    }
    None
}

/// Evaluate every labeled manifest case against masks in `pred_dir`
/// (named `<case_id>.nii.gz`). Missing predictions fail the run unless
/// `allow_missing` is set, in which case they are listed and skipped.
pub fn evaluate_cases(
    pred_dir: impl AsRef<Path>,
    manifest: &DatasetManifest,
    connectivity: Connectivity,
    matching: LesionMatching,
    allow_missing: bool,
) -> Result<MetricsReport> {
    let pred_dir = pred_dir.as_ref();
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for case in manifest.labeled_cases() {
        let label_path = case.label.as_ref().expect("labeled case");
        let Some(pred_path) = prediction_path(pred_dir, &case.case_id) else {
            missing.push(case.case_id.clone());
            continue;
        };
        let gt = io::load_mask(label_path)?;
        let pred = io::load_mask(&pred_path)?;
        rows.push(CaseMetrics {
            case_id: case.case_id.clone(),
            dice: dice_score(&pred, &gt)?,
            lesion_f1: lesion_f1(&pred, &gt, connectivity, matching)?,
            avd_ml: abs_volume_difference(&pred, &gt)?,
            lesion_count_diff: lesion_count_difference(&pred, &gt, connectivity)?,
        });
    }
    if !missing.is_empty() && !allow_missing {
        return Err(Error::Evaluation(format!(
            "missing predictions for {} case(s): {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(MetricsReport::from_rows(rows, missing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Geometry;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(labels: Array3<u8>) -> SegmentationMask {
        SegmentationMask::new(labels, Geometry::identity([1.0; 3]))
    }

    /// Independent component oracle: union-find over all neighbor pairs.
    fn union_find_components(m: &Array3<u8>, conn: Connectivity) -> (usize, Array3<u32>) {
        let dims = m.dim();
        let idx = |i: usize, j: usize, k: usize| (i * dims.1 + j) * dims.2 + k;
        let mut parent: Vec<usize> = (0..dims.0 * dims.1 * dims.2).collect();
        fn find(parent: &mut Vec<usize>, a: usize) -> usize {
            let mut root = a;
            while parent[root] != root {
                root = parent[root];
            }
            let mut cur = a;
            while parent[cur] != root {
                let next = parent[cur];
                parent[cur] = root;
                cur = next;
            }
            root
        }
        let offsets = conn.offsets();
        for ((i, j, k), &v) in m.indexed_iter() {
            if v == 0 {
                continue;
            }
            for off in &offsets {
                let ni = i as isize + off[0];
                let nj = j as isize + off[1];
                let nk = k as isize + off[2];
                if ni < 0 || nj < 0 || nk < 0 {
                    continue;
                }
                let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                if ni >= dims.0 || nj >= dims.1 || nk >= dims.2 || m[[ni, nj, nk]] == 0 {
                    continue;
                }
                let (a, b) = (find(&mut parent, idx(i, j, k)), find(&mut parent, idx(ni, nj, nk)));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut label_of_root = std::collections::HashMap::new();
        let mut map = Array3::<u32>::zeros(dims);
        let mut n = 0u32;
        for ((i, j, k), &v) in m.indexed_iter() {
            if v == 0 {
                continue;
            }
            let root = find(&mut parent, idx(i, j, k));
            let label = *label_of_root.entry(root).or_insert_with(|| {
                n += 1;
                n
            });
            map[[i, j, k]] = label;
        }
        (n as usize, map)
    }

    #[test]
    fn empty_mask_has_no_components() {
        let c = connected_components(&Array3::zeros((4, 4, 4)), Connectivity::TwentySix);
        assert_eq!(c.n, 0);
    }

    #[test]
    fn diagonal_neighbors_depend_on_connectivity() {
        let mut m = Array3::<u8>::zeros((3, 3, 3));
        m[[0, 0, 0]] = 1;
        m[[1, 1, 1]] = 1; // corner-adjacent
        assert_eq!(connected_components(&m, Connectivity::TwentySix).n, 1);
        assert_eq!(connected_components(&m, Connectivity::Six).n, 2);
        assert_eq!(connected_components(&m, Connectivity::Eighteen).n, 2);

        let mut e = Array3::<u8>::zeros((3, 3, 3));
        e[[0, 0, 0]] = 1;
        e[[0, 1, 1]] = 1; // edge-adjacent
        assert_eq!(connected_components(&e, Connectivity::Eighteen).n, 1);
        assert_eq!(connected_components(&e, Connectivity::Six).n, 2);
    }

    #[test]
    fn component_ids_are_assigned_in_scan_order() {
        let mut m = Array3::<u8>::zeros((4, 4, 4));
        m[[3, 3, 3]] = 1;
        m[[0, 0, 1]] = 1;
        m[[1, 2, 0]] = 1;
        let c = connected_components(&m, Connectivity::Six);
        assert_eq!(c.n, 3);
        assert_eq!(c.component_map[[0, 0, 1]], 1);
        assert_eq!(c.component_map[[1, 2, 0]], 2);
        assert_eq!(c.component_map[[3, 3, 3]], 3);
    }

    #[test]
    fn fuzz_components_match_union_find_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..100 {
            let dims = (
                rng.random_range(1..16usize),
                rng.random_range(1..16usize),
                rng.random_range(1..16usize),
            );
            let density = rng.random_range(0.05..0.6);
            let m = Array3::from_shape_simple_fn(dims, || {
                (rng.random::<f64>() < density) as u8
            });
            for conn in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
                let ours = connected_components(&m, conn);
                let (n, oracle_map) = union_find_components(&m, conn);
                assert_eq!(ours.n, n, "trial {trial}: component count");
                // Same partition: labels must be related by a bijection.
                let mut fwd = std::collections::HashMap::new();
                for (&a, &b) in ours.component_map.iter().zip(oracle_map.iter()) {
                    assert_eq!(a == 0, b == 0);
                    if a != 0 {
                        assert_eq!(*fwd.entry(a).or_insert(b), b, "trial {trial}: split");
                    }
                }
                let total: usize = ours.voxel_counts.iter().sum();
                assert_eq!(total, m.iter().filter(|&&v| v == 1).count());
            }
        }
    }

    #[test]
    fn dice_identities() {
        let mut a = Array3::<u8>::zeros((8, 8, 8));
        a[[1, 1, 1]] = 1;
        a[[1, 1, 2]] = 1;
        let ma = mask(a.clone());
        assert_eq!(dice_score(&ma, &ma).unwrap(), 1.0);

        let mut b = Array3::<u8>::zeros((8, 8, 8));
        b[[5, 5, 5]] = 1;
        assert_eq!(dice_score(&ma, &mask(b)).unwrap(), 0.0);

        let empty = mask(Array3::zeros((8, 8, 8)));
        assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn dice_hand_count() {
        // |P| = 4, |G| = 6, |P ^ G| = 3 -> 2*3/10 = 0.6
        let mut p = Array3::<u8>::zeros((8, 8, 8));
        let mut g = Array3::<u8>::zeros((8, 8, 8));
        for k in 0..3 {
            p[[0, 0, k]] = 1;
            g[[0, 0, k]] = 1;
        }
        p[[7, 7, 7]] = 1;
        for k in 0..3 {
            g[[4, 4, k]] = 1;
        }
        assert_abs_diff_eq!(dice_score(&mask(p), &mask(g)).unwrap(), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn lesion_f1_fixtures() {
        // identical 3-lesion masks -> 1.0
        let mut m = Array3::<u8>::zeros((12, 12, 12));
        for c in [[1usize, 1, 1], [5, 5, 5], [9, 9, 9]] {
            m[[c[0], c[1], c[2]]] = 1;
        }
        let ma = mask(m.clone());
        assert_eq!(
            lesion_f1(&ma, &ma, Connectivity::TwentySix, LesionMatching::AnyOverlap).unwrap(),
            1.0
        );

        // pred empty, gt 2 lesions -> 0.0
        let empty = mask(Array3::zeros((12, 12, 12)));
        let mut g2 = Array3::<u8>::zeros((12, 12, 12));
        g2[[0, 0, 0]] = 1;
        g2[[6, 6, 6]] = 1;
        assert_eq!(
            lesion_f1(&empty, &mask(g2.clone()), Connectivity::TwentySix, LesionMatching::AnyOverlap)
                .unwrap(),
            0.0
        );

        // both empty -> 1.0
        assert_eq!(
            lesion_f1(&empty, &empty, Connectivity::TwentySix, LesionMatching::AnyOverlap).unwrap(),
            1.0
        );

        // gt 2 lesions, pred hits one and adds a spurious one:
        // TP=1, FN=1, FP=1 -> F1 = 0.5
        let mut p = Array3::<u8>::zeros((12, 12, 12));
        p[[0, 0, 0]] = 1; // hits gt lesion 1
        p[[11, 11, 11]] = 1; // spurious
        assert_abs_diff_eq!(
            lesion_f1(&mask(p), &mask(g2), Connectivity::TwentySix, LesionMatching::AnyOverlap)
                .unwrap(),
            0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn one_to_one_matching_penalizes_merged_predictions() {
        // One big predicted lesion covering two gt lesions: any-overlap
        // detects both (F1 = 2*2/(2*2+0+0) = 1), one-to-one matches a single
        // pair (TP=1, FN=1, FP=0 -> F1 = 2/3).
        let mut g = Array3::<u8>::zeros((10, 3, 3));
        g[[1, 1, 1]] = 1;
        g[[8, 1, 1]] = 1;
        let mut p = Array3::<u8>::zeros((10, 3, 3));
        for i in 0..10 {
            p[[i, 1, 1]] = 1;
        }
        let any = lesion_f1(&mask(p.clone()), &mask(g.clone()), Connectivity::TwentySix, LesionMatching::AnyOverlap).unwrap();
        let one = lesion_f1(&mask(p), &mask(g), Connectivity::TwentySix, LesionMatching::OneToOne).unwrap();
        assert_eq!(any, 1.0);
        assert_abs_diff_eq!(one, 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn volume_difference_unit_conversions() {
        let mut p = Array3::<u8>::zeros((12, 12, 12));
        for ((i, j, k), v) in p.indexed_iter_mut() {
            if i < 10 && j < 10 && k < 10 {
                *v = 1;
            }
        }
        let g = Array3::<u8>::zeros((12, 12, 12));
        // 1000 voxels at 1 mm^3 = 1 ml
        assert_abs_diff_eq!(
            abs_volume_difference(&mask(p.clone()), &mask(g.clone())).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        // 125 voxels at (2,2,2) spacing = 125 * 8 mm^3 = 1 ml
        let geom = Geometry::identity([2.0, 2.0, 2.0]);
        let mut p5 = Array3::<u8>::zeros((8, 8, 8));
        for ((i, j, k), v) in p5.indexed_iter_mut() {
            if i < 5 && j < 5 && k < 5 {
                *v = 1;
            }
        }
        let pm = SegmentationMask::new(p5, geom.clone());
        let gm = SegmentationMask::new(Array3::zeros((8, 8, 8)), geom);
        assert_abs_diff_eq!(abs_volume_difference(&pm, &gm).unwrap(), 1.0, epsilon = 1e-12);
        // identical masks -> 0
        assert_eq!(abs_volume_difference(&pm, &pm).unwrap(), 0.0);
    }

    #[test]
    fn count_difference_fixtures() {
        let mut p = Array3::<u8>::zeros((12, 12, 12));
        for c in [[0usize, 0, 0], [4, 4, 4], [8, 8, 8]] {
            p[[c[0], c[1], c[2]]] = 1;
        }
        let mut g = Array3::<u8>::zeros((12, 12, 12));
        g[[0, 0, 0]] = 1;
        assert_eq!(
            lesion_count_difference(&mask(p.clone()), &mask(g), Connectivity::TwentySix).unwrap(),
            2
        );
        assert_eq!(
            lesion_count_difference(&mask(p.clone()), &mask(p), Connectivity::TwentySix).unwrap(),
            0
        );
    }

    #[test]
    fn metric_symmetry_and_bounds_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..200 {
            let dims = (
                rng.random_range(1..10usize),
                rng.random_range(1..10usize),
                rng.random_range(1..10usize),
            );
            let a = mask(Array3::from_shape_simple_fn(dims, || {
                (rng.random::<f64>() < 0.3) as u8
            }));
            let b = mask(Array3::from_shape_simple_fn(dims, || {
                (rng.random::<f64>() < 0.3) as u8
            }));
            let d1 = dice_score(&a, &b).unwrap();
            let d2 = dice_score(&b, &a).unwrap();
            assert_eq!(d1, d2);
            assert!((0.0..=1.0).contains(&d1));
            assert_eq!(
                abs_volume_difference(&a, &b).unwrap(),
                abs_volume_difference(&b, &a).unwrap()
            );
            assert_eq!(
                lesion_count_difference(&a, &b, Connectivity::TwentySix).unwrap(),
                lesion_count_difference(&b, &a, Connectivity::TwentySix).unwrap()
            );
            let f = lesion_f1(&a, &b, Connectivity::TwentySix, LesionMatching::AnyOverlap).unwrap();
            assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn adding_a_correct_voxel_never_decreases_dice() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let dims = (6usize, 6, 6);
            let g = Array3::from_shape_simple_fn(dims, || (rng.random::<f64>() < 0.4) as u8);
            let mut p = Array3::from_shape_simple_fn(dims, || (rng.random::<f64>() < 0.3) as u8);
            // find a gt voxel not yet predicted
            let missing: Vec<_> = g
                .indexed_iter()
                .filter(|(idx, &v)| v == 1 && p[[idx.0, idx.1, idx.2]] == 0)
                .map(|(idx, _)| idx)
                .collect();
            if missing.is_empty() {
                continue;
            }
            let before = dice_score(&mask(p.clone()), &mask(g.clone())).unwrap();
            let (i, j, k) = missing[rng.random_range(0..missing.len())];
            p[[i, j, k]] = 1;
            let after = dice_score(&mask(p), &mask(g)).unwrap();
            assert!(after >= before);
        }
    }

    #[test]
    fn evaluate_cases_aggregates_and_flags_missing() {
        use crate::io::{save_manifest, save_mask, CaseRecord};
        let dir = tempfile::tempdir().unwrap();
        let pred_dir = dir.path().join("preds");
        std::fs::create_dir_all(&pred_dir).unwrap();

        let mut cases = Vec::new();
        for i in 0..3 {
            let mut labels = Array3::<u8>::zeros((8, 8, 8));
            labels[[i, i, i]] = 1;
            let gt = mask(labels.clone());
            let label_path = dir.path().join(format!("c{i}_label.nii.gz"));
            save_mask(&gt, &label_path).unwrap();
            let img = dir.path().join(format!("c{i}_img.nii.gz"));
            crate::io::save_volume(
                &crate::volume::ImageVolume::new(
                    Array3::zeros((8, 8, 8)),
                    Geometry::identity([1.0; 3]),
                    crate::volume::Modality::Dwi,
                ),
                &img,
            )
            .unwrap();
            // perfect prediction for each case
            save_mask(&gt, pred_dir.join(format!("c{i}.nii.gz"))).unwrap();
            cases.push(CaseRecord {
                case_id: format!("c{i}"),
                dwi: img.clone(),
                adc: img,
                flair: None,
                label: Some(label_path),
            });
        }
        let manifest = DatasetManifest::new(cases);
        let mpath = dir.path().join("manifest.json");
        save_manifest(&manifest, &mpath).unwrap();

        let report = evaluate_cases(
            &pred_dir,
            &manifest,
            Connectivity::TwentySix,
            LesionMatching::AnyOverlap,
            false,
        )
        .unwrap();
        assert_eq!(report.cases.len(), 3);
        assert_eq!(report.mean_dice, 1.0);
        assert_eq!(report.mean_lesion_f1, 1.0);
        assert_eq!(report.mean_avd_ml, 0.0);
        assert_eq!(report.mean_lesion_count_diff, 0.0);

        // remove one prediction: strict run errors, lenient lists it
        std::fs::remove_file(pred_dir.join("c1.nii.gz")).unwrap();
        assert!(evaluate_cases(
            &pred_dir,
            &manifest,
            Connectivity::TwentySix,
            LesionMatching::AnyOverlap,
            false
        )
        .is_err());
        let lenient = evaluate_cases(
            &pred_dir,
            &manifest,
            Connectivity::TwentySix,
            LesionMatching::AnyOverlap,
            true,
        )
        .unwrap();
        assert_eq!(lenient.missing, vec!["c1".to_string()]);
        assert_eq!(lenient.cases.len(), 2);

        let out = dir.path().join("report");
        lenient.write(&out).unwrap();
        let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert!(csv.starts_with("case_id,dice,lesion_f1,avd_ml,lesion_count_diff"));
    }
}
