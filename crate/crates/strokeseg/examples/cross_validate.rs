//! Toy cross-validation: every (repeat, fold) pair trains its own model and
//! the summary table mirrors the usual per-fold Dice report.
//!
//!     cargo run --release --example cross_validate -- [out_dir] [repeats]

use strokeseg::augment::AugmentConfig;
use strokeseg::loss::LossConfig;
use strokeseg::nn::segresnet::NetworkConfig;
use strokeseg::preprocess::{CropSpec, PreprocessConfig};
use strokeseg::synth::{write_dataset, SyntheticSpec};
use strokeseg::train::{crossval_summary, make_folds, run_crossval, EarlyStop, TrainConfig};

fn main() -> strokeseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out: std::path::PathBuf = args.next().unwrap_or_else(|| "target/demo-cv".into()).into();
    let repeats: usize = args.next().map(|s| s.parse().expect("repeats")).unwrap_or(2);

    let manifest = write_dataset(
        &out.join("data"),
        &SyntheticSpec {
            cases: 6,
            dims: [24, 24, 24],
            radius: (4.0, 6.0),
            seed: 8,
            ..Default::default()
        },
    )?;
    let manifest = make_folds(&manifest, 2, 0)?;

    let net_cfg = NetworkConfig {
        init_filters: 4,
        blocks_down: vec![1, 1],
        blocks_up: vec![1],
        ds_heads: 1,
        ..NetworkConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 40,
        lr0: 2e-3,
        folds: 2,
        batch_size_global: 1,
        val_interval: 5,
        checkpoint_dir: out.join("ckpt"),
        crop: CropSpec {
            size: [16, 16, 16],
            foreground_bias: 0.9,
        },
        loss: LossConfig {
            num_ds_levels: 2,
            ..Default::default()
        },
        augment: AugmentConfig {
            affine_prob: 0.0,
            smooth_prob: 0.0,
            noise_prob: 0.0,
            intensity_scale_prob: 0.0,
            intensity_shift_prob: 0.0,
            ..AugmentConfig::default()
        },
        early_stop: Some(EarlyStop {
            min_epochs: 15,
            val_dice: 0.9,
        }),
        ..TrainConfig::default()
    };

    let results = run_crossval(
        &manifest,
        &net_cfg,
        &train_cfg,
        &PreprocessConfig::default(),
        repeats,
    )?;
    print!("{}", crossval_summary(&results, train_cfg.folds));
    println!("{} best checkpoints:", results.len());
    for r in &results {
        println!("  run{} fold{}: {}", r.repeat, r.fold_index, r.checkpoint_path.display());
    }
    Ok(())
}
