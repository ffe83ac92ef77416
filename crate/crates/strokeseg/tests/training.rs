//! Trainer integration: fold hygiene, history bookkeeping, checkpoint
//! selection and the resume contract, all on a tiny synthetic dataset.

use strokeseg::io::DatasetManifest;
use strokeseg::nn::segresnet::NetworkConfig;
use strokeseg::preprocess::{CropSpec, PreprocessConfig};
use strokeseg::synth::{write_dataset, SyntheticSpec};
use strokeseg::train::{make_folds, run_crossval, train_fold, EarlyStop, TrainConfig};

fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        in_channels: 2,
        out_channels: 2,
        init_filters: 4,
        blocks_down: vec![1, 1],
        blocks_up: vec![1],
        ds_heads: 1,
        ..NetworkConfig::default()
    }
}

fn tiny_train(dir: &std::path::Path, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr0: 1e-3,
        weight_decay: 1e-5,
        batch_size_global: 2,
        micro_batch: 1,
        folds: 3,
        seed: 7,
        val_interval: 1,
        checkpoint_dir: dir.to_path_buf(),
        crops_per_case: 1,
        crop: CropSpec {
            size: [12, 12, 12],
            foreground_bias: 0.9,
        },
        augment: strokeseg::augment::AugmentConfig::disabled(),
        loss: strokeseg::loss::LossConfig {
            num_ds_levels: 2,
            ..Default::default()
        },
        ..TrainConfig::default()
    }
}

fn tiny_dataset(dir: &std::path::Path) -> DatasetManifest {
    let spec = SyntheticSpec {
        cases: 3,
        dims: [16, 16, 16],
        radius: (3.0, 4.5),
        seed: 5,
        ..SyntheticSpec::default()
    };
    let manifest = write_dataset(dir, &spec).unwrap();
    make_folds(&manifest, 3, 1).unwrap()
}

#[test]
fn train_fold_runs_and_keeps_consistent_history() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"));
    let ckpt_dir = dir.path().join("ckpt");
    let cfg = tiny_train(&ckpt_dir, 3);
    let result = train_fold(&manifest, 0, &tiny_network(), &cfg, &PreprocessConfig::default())
        .unwrap();

    assert_eq!(result.history.len(), 3, "one history row per epoch");
    for (e, row) in result.history.iter().enumerate() {
        assert_eq!(row.epoch, e);
        assert!(row.train_loss.is_finite());
        assert!(row.val_dice.is_some(), "val_interval = 1 validates every epoch");
    }
    // lr follows the cosine schedule
    assert_eq!(result.history[0].lr, 1e-3);
    assert!(result.history[2].lr < result.history[1].lr);
    // best selection invariant
    let best_in_history = result
        .history
        .iter()
        .filter_map(|h| h.val_dice)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(result.best_val_dice, best_in_history);

    let fold_dir = ckpt_dir.join("fold0");
    assert!(fold_dir.join("latest.ckpt").exists());
    assert!(fold_dir.join("best.ckpt").exists());
    let csv = std::fs::read_to_string(fold_dir.join("history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header + 3 epochs");
}

#[test]
fn single_epoch_run_has_exactly_one_history_row() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"));
    let cfg = tiny_train(&dir.path().join("ckpt"), 1);
    let result = train_fold(&manifest, 1, &tiny_network(), &cfg, &PreprocessConfig::default())
        .unwrap();
    assert_eq!(result.history.len(), 1);
}

#[test]
fn resume_continues_where_the_interrupted_run_stopped() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"));
    let net = tiny_network();
    let pre = PreprocessConfig::default();

    // Straight-through run.
    let full_dir = dir.path().join("full");
    let cfg_full = tiny_train(&full_dir, 4);
    let full = train_fold(&manifest, 0, &net, &cfg_full, &pre).unwrap();

    // Same run interrupted after 2 epochs, then resumed.
    let part_dir = dir.path().join("part");
    let mut cfg_part = tiny_train(&part_dir, 4);
    cfg_part.early_stop = Some(EarlyStop {
        min_epochs: 2,
        val_dice: -1.0, // stop as soon as allowed
    });
    let interrupted = train_fold(&manifest, 0, &net, &cfg_part, &pre).unwrap();
    assert_eq!(interrupted.history.len(), 2);

    cfg_part.early_stop = None;
    cfg_part.resume = true;
    let resumed = train_fold(&manifest, 0, &net, &cfg_part, &pre).unwrap();
    assert_eq!(resumed.history.len(), 4, "history continues without duplicates");
    let epochs: Vec<usize> = resumed.history.iter().map(|h| h.epoch).collect();
    assert_eq!(epochs, vec![0, 1, 2, 3]);

    // Same trajectory as the uninterrupted run within optimizer-state
    // round-trip tolerance.
    for (a, b) in full.history.iter().zip(&resumed.history) {
        assert!(
            (a.train_loss - b.train_loss).abs() <= 1e-4 * a.train_loss.abs().max(1.0),
            "epoch {}: {} vs {}",
            a.epoch,
            a.train_loss,
            b.train_loss
        );
    }
}

#[test]
fn fold_out_of_range_and_empty_split_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"));
    let cfg = tiny_train(&dir.path().join("ckpt"), 1);
    assert!(train_fold(&manifest, 9, &tiny_network(), &cfg, &PreprocessConfig::default()).is_err());

    // manifest without folds: every labeled case would be train, none val
    let mut no_folds = manifest.clone();
    no_folds.folds.clear();
    assert!(
        train_fold(&no_folds, 0, &tiny_network(), &cfg, &PreprocessConfig::default()).is_err()
    );
}

#[test]
fn crossval_produces_one_result_per_fold_and_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"));
    let mut cfg = tiny_train(&dir.path().join("ckpt"), 1);
    cfg.folds = 3;
    let results = run_crossval(
        &manifest,
        &tiny_network(),
        &cfg,
        &PreprocessConfig::default(),
        2,
    )
    .unwrap();
    assert_eq!(results.len(), 6);
    for r in &results {
        assert!(r.checkpoint_path.exists(), "missing {:?}", r.checkpoint_path);
    }
    // validation sets are disjoint across folds within a repeat
    let (t0, v0) = manifest.train_val_split(0);
    let (_, v1) = manifest.train_val_split(1);
    let v0_ids: Vec<_> = v0.iter().map(|c| &c.case_id).collect();
    assert!(v1.iter().all(|c| !v0_ids.contains(&&c.case_id)));
    assert!(t0.iter().all(|c| !v0_ids.contains(&&c.case_id)));
    // summary table renders a row per repeat
    let summary = strokeseg::train::crossval_summary(&results, 3);
    assert!(summary.contains("fold0"));
    assert!(summary.lines().count() >= 4);
}
