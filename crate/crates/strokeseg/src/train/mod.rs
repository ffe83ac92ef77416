//! Optimization loop: epoch scheduling, gradient accumulation, validation
//! with checkpoint selection, resume, and cross-validation orchestration.

pub mod checkpoint;
pub mod folds;
pub mod optim;
pub mod schedule;

pub use checkpoint::{CheckpointMeta, EpochStats};
pub use folds::make_folds;
pub use optim::AdamW;
pub use schedule::cosine_lr;

use std::collections::HashSet;
use std::path::PathBuf;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::infer::{binarize, sliding_window_predict, InferenceConfig};
use crate::io::{CaseRecord, DatasetManifest};
use crate::loss::{deep_supervision_grad, LossConfig};
use crate::metrics::dice_score;
use crate::nn::segresnet::{NetworkConfig, SegResNet};
use crate::nn::weights::save_weights;
use crate::preprocess::{
    pad_mask_to_min, pad_to_min, preprocess_case, sample_crop, CropSpec, PreprocessConfig,
};
use crate::rng::{stream_rng, Stream};
use crate::volume::{MultiChannelVolume, SegmentationMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugmentStage {
    #[default]
    PostCrop,
    PreCrop,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    /// Never stop before this many epochs have run.
    pub min_epochs: usize,
    /// Stop once validation Dice reaches this value.
    pub val_dice: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    /// Effective batch size, realized by gradient accumulation over
    /// micro-batches.
    pub batch_size_global: usize,
    /// Samples processed jointly per backward pass.
    pub micro_batch: usize,
    pub folds: usize,
    pub seed: u64,
    /// Epochs between validation passes.
    pub val_interval: usize,
    pub checkpoint_dir: PathBuf,
    pub pretrained_weights: Option<PathBuf>,
    pub crops_per_case: usize,
    pub augment_stage: AugmentStage,
    pub resume: bool,
    pub early_stop: Option<EarlyStop>,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub crop: CropSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            lr0: 2e-4,
            weight_decay: 1e-5,
            batch_size_global: 8,
            micro_batch: 1,
            folds: 5,
            seed: 0,
            val_interval: 5,
            checkpoint_dir: PathBuf::from("checkpoints"),
            pretrained_weights: None,
            crops_per_case: 1,
            augment_stage: AugmentStage::PostCrop,
            resume: false,
            early_stop: None,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            crop: CropSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be > 0".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        if self.batch_size_global < 1 || self.micro_batch < 1 || self.crops_per_case < 1 {
            return Err(Error::Config(
                "batch_size_global, micro_batch and crops_per_case must be >= 1".into(),
            ));
        }
        if self.val_interval < 1 {
            return Err(Error::Config("val_interval must be >= 1".into()));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.crop.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub repeat: usize,
    pub best_val_dice: f64,
    pub checkpoint_path: PathBuf,
    pub history: Vec<EpochStats>,
    pub pretrained_skipped: Vec<String>,
}

struct PreparedCase {
    id: String,
    img: MultiChannelVolume,
    mask: SegmentationMask,
}

fn prepare_cases(records: &[&CaseRecord], pre_cfg: &PreprocessConfig) -> Result<Vec<PreparedCase>> {
    records
        .iter()
        .map(|rec| {
            let (img, mask, _) = preprocess_case(rec, pre_cfg)?;
            let mask = mask.ok_or_else(|| {
                Error::Train(format!("case \"{}\" has no label volume", rec.case_id))
            })?;
            Ok(PreparedCase {
                id: rec.case_id.clone(),
                img,
                mask,
            })
        })
        .collect()
}

/// Resume-compatibility digest: everything that would silently change the
/// optimization if it differed across a resume. Run-mode knobs (resume,
/// early_stop, val_interval, paths) stay out.
fn config_hash(net_cfg: &NetworkConfig, cfg: &TrainConfig, pre_cfg: &PreprocessConfig) -> String {
    let blob = serde_json::json!({
        "network": net_cfg,
        "preprocess": pre_cfg,
        "train": {
            "epochs": cfg.epochs,
            "lr0": cfg.lr0,
            "weight_decay": cfg.weight_decay,
            "batch_size_global": cfg.batch_size_global,
            "micro_batch": cfg.micro_batch,
            "folds": cfg.folds,
            "seed": cfg.seed,
            "crops_per_case": cfg.crops_per_case,
            "augment_stage": cfg.augment_stage,
            "loss": cfg.loss,
            "augment": cfg.augment,
            "crop": cfg.crop,
        },
    });
    let digest = Sha256::digest(serde_json::to_vec(&blob).expect("serializable configs"));
    digest.iter().fold(String::new(), |mut acc, b| {
        acc.push_str(&format!("{b:02x}"));
        acc
    })
}

/// One random (possibly foreground-biased) augmented patch of a case.
fn prepare_sample(
    case: &PreparedCase,
    cfg: &TrainConfig,
    crop_rng: &mut rand_chacha::ChaCha8Rng,
    aug_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Array4<f32>, Array3<u8>)> {
    let (img, mask) = match cfg.augment_stage {
        AugmentStage::PostCrop => {
            let (padded, _) = pad_to_min(&case.img, cfg.crop.size, 0.0);
            let padded_mask = pad_mask_to_min(&case.mask, cfg.crop.size);
            let (crop_img, crop_mask) =
                sample_crop(&padded, Some(&padded_mask), &cfg.crop, crop_rng)?;
            augment(
                &crop_img,
                crop_mask.as_ref(),
                &cfg.augment,
                aug_rng,
            )?
        }
        AugmentStage::PreCrop => {
            let (aug_img, aug_mask) =
                augment(&case.img, Some(&case.mask), &cfg.augment, aug_rng)?;
            let (padded, _) = pad_to_min(&aug_img, cfg.crop.size, 0.0);
            let padded_mask = pad_mask_to_min(aug_mask.as_ref().expect("mask in"), cfg.crop.size);
            sample_crop(&padded, Some(&padded_mask), &cfg.crop, crop_rng)?
        }
    };
    let mask = mask.expect("mask tracked through augmentation");
    Ok((img.data, mask.labels))
}

/// Mean whole-volume Dice over the validation cases, via sliding-window
/// inference at the training patch size.
fn validation_dice(
    net: &SegResNet<f32>,
    cases: &[PreparedCase],
    window: [usize; 3],
) -> Result<f64> {
    let infer_cfg = InferenceConfig {
        window,
        overlap: 0.5,
        save_probs: false,
    };
    let mut total = 0.0;
    for case in cases {
        let pm = sliding_window_predict(net, &case.img, &infer_cfg)?;
        let pred = binarize(&pm);
        total += dice_score(&pred, &case.mask)?;
    }
    Ok(total / cases.len() as f64)
}

fn write_history_csv(dir: &std::path::Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,val_dice\n");
    for h in history {
        out.push_str(&format!(
            "{},{:.8e},{:.6},{}\n",
            h.epoch,
            h.lr,
            h.train_loss,
            h.val_dice.map(|d| format!("{d:.6}")).unwrap_or_default()
        ));
    }
    let path = dir.join("history.csv");
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

/// Train one cross-validation fold: optimize on every labeled case outside
/// `fold`, validate on the cases inside it, keep latest and best
/// checkpoints.
pub fn train_fold(
    manifest: &DatasetManifest,
    fold: usize,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    pre_cfg: &PreprocessConfig,
) -> Result<FoldResult> {
    train_fold_with_repeat(manifest, fold, 0, net_cfg, cfg, pre_cfg)
}

fn train_fold_with_repeat(
    manifest: &DatasetManifest,
    fold: usize,
    repeat: usize,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    pre_cfg: &PreprocessConfig,
) -> Result<FoldResult> {
    cfg.validate()?;
    net_cfg.validate()?;
    if fold >= cfg.folds {
        return Err(Error::Config(format!(
            "fold {fold} outside 0..{}",
            cfg.folds
        )));
    }
    let div = net_cfg.divisor();
    for (axis, s) in cfg.crop.size.iter().enumerate() {
        if s % div != 0 {
            return Err(Error::Config(format!(
                "crop axis {axis} ({s}) not divisible by the network factor {div}"
            )));
        }
    }

    let (train_records, val_records) = manifest.train_val_split(fold);
    if train_records.is_empty() || val_records.is_empty() {
        return Err(Error::Train(format!(
            "fold {fold}: empty split (train {}, val {})",
            train_records.len(),
            val_records.len()
        )));
    }
    // Data hygiene, asserted on every run.
    let train_ids: HashSet<&str> = train_records.iter().map(|c| c.case_id.as_str()).collect();
    let val_ids: HashSet<&str> = val_records.iter().map(|c| c.case_id.as_str()).collect();
    if !train_ids.is_disjoint(&val_ids) {
        return Err(Error::Train(format!(
            "fold {fold}: train and validation sets overlap"
        )));
    }

    let train_cases = prepare_cases(&train_records, pre_cfg)?;
    let val_cases = prepare_cases(&val_records, pre_cfg)?;

    let fold_dir = cfg.checkpoint_dir.join(format!("fold{fold}"));
    std::fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;
    let latest_path = fold_dir.join("latest.ckpt");
    let best_path = fold_dir.join("best.ckpt");
    let hash = config_hash(net_cfg, cfg, pre_cfg);

    let mut opt = AdamW::new(cfg.weight_decay);
    let mut pretrained_skipped = Vec::new();
    let (mut net, mut history, mut best_val, start_epoch) = if cfg.resume && latest_path.exists() {
        let loaded = checkpoint::load_checkpoint(&latest_path, net_cfg, &mut opt)?;
        if loaded.meta.config_hash != hash {
            return Err(Error::Train(format!(
                "fold {fold}: cannot resume, configuration changed since the checkpoint"
            )));
        }
        let start = loaded.meta.epoch + 1;
        (
            loaded.net,
            loaded.meta.history,
            loaded.meta.best_val_dice,
            start,
        )
    } else {
        let mut rng = stream_rng(cfg.seed, Stream::WeightInit, fold as u64, repeat as u64);
        let mut net = SegResNet::<f32>::build(net_cfg.clone(), &mut rng)?;
        if let Some(path) = &cfg.pretrained_weights {
            // Lenient: shape-matched tensors load, the rest stay freshly
            // initialized (e.g. the first conv when channel counts differ).
            let archive = crate::nn::weights::Archive::read(path)?;
            let report = crate::nn::weights::load_into(&mut net, &archive, false)?;
            pretrained_skipped = report.skipped;
        }
        (net, Vec::new(), f64::NEG_INFINITY, 0)
    };

    let groups_per_step = cfg.batch_size_global.div_ceil(cfg.micro_batch).max(1);
    let mixed_seed = cfg.seed ^ (repeat as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);

    'epochs: for epoch in start_epoch..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.lr0, cfg.epochs)?;

        // deterministic shuffled sample order: cases x crops_per_case
        let mut order: Vec<usize> = (0..train_cases.len())
            .flat_map(|i| std::iter::repeat(i).take(cfg.crops_per_case))
            .collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = stream_rng(mixed_seed, Stream::Shuffle, fold as u64, epoch as u64);
            order.shuffle(&mut rng);
        }

        let mut epoch_loss = 0.0;
        let mut groups_in_epoch = 0usize;
        let mut groups_in_step = 0usize;
        net.zero_grads();

        let mut cursor = 0usize;
        let mut sample_index = 0u64;
        while cursor < order.len() {
            let take = cfg.micro_batch.min(order.len() - cursor);
            let mut batch_imgs = Vec::with_capacity(take);
            let mut batch_targets = Vec::with_capacity(take);
            let mut batch_ids = Vec::with_capacity(take);
            for &case_idx in &order[cursor..cursor + take] {
                let case = &train_cases[case_idx];
                let mut crop_rng = stream_rng(
                    mixed_seed,
                    Stream::Crop,
                    (fold as u64) << 32 | epoch as u64,
                    sample_index,
                );
                let mut aug_rng = stream_rng(
                    mixed_seed,
                    Stream::Augment,
                    (fold as u64) << 32 | epoch as u64,
                    sample_index,
                );
                let (img, target) = prepare_sample(case, cfg, &mut crop_rng, &mut aug_rng)?;
                batch_imgs.push(img);
                batch_targets.push(target);
                batch_ids.push(case.id.clone());
                sample_index += 1;
            }
            cursor += take;

            let mut outputs = Vec::with_capacity(take);
            let mut tapes = Vec::with_capacity(take);
            for img in batch_imgs {
                let (logits, tape) = net.forward_train(img)?;
                outputs.push(logits);
                tapes.push(tape);
            }
            let (loss, grads) = deep_supervision_grad(&outputs, &batch_targets, &cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "fold {fold} epoch {epoch}: non-finite loss {loss} on cases {batch_ids:?}"
                )));
            }
            for (tape, g) in tapes.iter().zip(&grads) {
                net.backward(tape, g)?;
            }
            epoch_loss += loss;
            groups_in_epoch += 1;
            groups_in_step += 1;

            let last = cursor >= order.len();
            if groups_in_step == groups_per_step || last {
                if groups_in_step > 1 {
                    let inv = 1.0 / groups_in_step as f32;
                    net.for_each_param(&mut |p| {
                        for g in p.grad.iter_mut() {
                            *g *= inv;
                        }
                    });
                }
                opt.step(&mut net, lr);
                net.zero_grads();
                groups_in_step = 0;
            }
        }
        let train_loss = epoch_loss / groups_in_epoch.max(1) as f64;

        let is_val_epoch = (epoch + 1) % cfg.val_interval == 0 || epoch + 1 == cfg.epochs;
        let val_dice = if is_val_epoch {
            Some(validation_dice(&net, &val_cases, cfg.crop.size)?)
        } else {
            None
        };

        history.push(EpochStats {
            epoch,
            lr,
            train_loss,
            val_dice,
        });

        let improved = val_dice.map(|d| d > best_val).unwrap_or(false);
        if improved {
            best_val = val_dice.expect("validated this epoch");
        }
        let meta = CheckpointMeta {
            epoch,
            step_count: opt.step_count,
            val_dice,
            best_val_dice: best_val,
            config_hash: hash.clone(),
            history: history.clone(),
        };
        checkpoint::save_checkpoint(&mut net, &opt, &meta, &latest_path)?;
        if improved {
            checkpoint::save_checkpoint(&mut net, &opt, &meta, &best_path)?;
        }
        write_history_csv(&fold_dir, &history)?;

        if let (Some(es), Some(d)) = (cfg.early_stop, val_dice) {
            if epoch + 1 >= es.min_epochs && d >= es.val_dice {
                break 'epochs;
            }
        }
    }

    if !best_path.exists() {
        // No validation epoch improved on -inf (e.g. zero val epochs ran);
        // fall back to the latest state so a checkpoint always exists.
        std::fs::copy(&latest_path, &best_path).map_err(|e| Error::io(&best_path, e))?;
    }
    let best_val_dice = if best_val.is_finite() { best_val } else { 0.0 };
    Ok(FoldResult {
        fold_index: fold,
        repeat,
        best_val_dice,
        checkpoint_path: best_path,
        history,
        pretrained_skipped,
    })
}

/// `repeats` full cross-validation runs with per-repeat seeds; every (repeat,
/// fold) pair trains its own model and keeps its own best checkpoint.
pub fn run_crossval(
    manifest: &DatasetManifest,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    pre_cfg: &PreprocessConfig,
    repeats: usize,
) -> Result<Vec<FoldResult>> {
    if repeats < 1 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    if manifest.num_folds() == 0 {
        return Err(Error::Train(
            "manifest has no fold assignment; run the split step first".into(),
        ));
    }
    let mut results = Vec::with_capacity(repeats * cfg.folds);
    for repeat in 0..repeats {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed ^ repeat as u64;
        run_cfg.checkpoint_dir = cfg.checkpoint_dir.join(format!("run{repeat}"));
        for fold in 0..cfg.folds {
            results.push(train_fold_with_repeat(
                manifest, fold, repeat, net_cfg, &run_cfg, pre_cfg,
            )?);
        }
    }
    Ok(results)
}

/// Per-fold table of best validation Dice, one row per repeat plus the mean,
/// matching the usual cross-validation report layout.
pub fn crossval_summary(results: &[FoldResult], folds: usize) -> String {
    let mut out = String::from("run");
    for f in 0..folds {
        out.push_str(&format!("  fold{f}"));
    }
    out.push_str("  mean\n");
    let repeats: Vec<usize> = {
        let mut r: Vec<usize> = results.iter().map(|r| r.repeat).collect();
        r.sort_unstable();
        r.dedup();
        r
    };
    let mut grand = Vec::new();
    for rep in repeats {
        out.push_str(&format!("{rep:3}"));
        let mut row = Vec::new();
        for f in 0..folds {
            let d = results
                .iter()
                .find(|r| r.repeat == rep && r.fold_index == f)
                .map(|r| r.best_val_dice)
                .unwrap_or(f64::NAN);
            row.push(d);
            out.push_str(&format!("  {d:.4}"));
        }
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        grand.push(mean);
        out.push_str(&format!("  {mean:.4}\n"));
    }
    let overall = grand.iter().sum::<f64>() / grand.len().max(1) as f64;
    out.push_str(&format!("overall mean best dice: {overall:.4}\n"));
    out
}

/// Save plain (weights-only) archives next to a checkpoint, for export.
pub fn export_weights(net: &mut SegResNet<f32>, path: impl AsRef<std::path::Path>) -> Result<()> {
    save_weights(net, path, serde_json::json!({"kind": "weights"}))
}
