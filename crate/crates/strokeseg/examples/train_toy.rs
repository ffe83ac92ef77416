//! Train a small model on a synthetic dataset and watch the loss fall and
//! the validation Dice rise. Finishes in a couple of minutes on a laptop.
//!
//!     cargo run --release --example train_toy -- [out_dir]

use strokeseg::augment::AugmentConfig;
use strokeseg::loss::LossConfig;
use strokeseg::nn::segresnet::NetworkConfig;
use strokeseg::preprocess::{CropSpec, PreprocessConfig};
use strokeseg::synth::{write_dataset, SyntheticSpec};
use strokeseg::train::{make_folds, train_fold, EarlyStop, TrainConfig};

fn main() -> strokeseg::Result<()> {
    let out: std::path::PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/demo-train".into())
        .into();
    let data_dir = out.join("data");
    let manifest = write_dataset(
        &data_dir,
        &SyntheticSpec {
            cases: 6,
            dims: [32, 32, 32],
            radius: (5.0, 8.0),
            seed: 3,
            ..Default::default()
        },
    )?;
    let manifest = make_folds(&manifest, 3, 0)?;

    let net_cfg = NetworkConfig {
        init_filters: 8,
        blocks_down: vec![1, 2],
        blocks_up: vec![1],
        ds_heads: 1,
        ..NetworkConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 80,
        lr0: 2e-3,
        folds: 3,
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
            min_epochs: 25,
            val_dice: 0.95,
        }),
        ..TrainConfig::default()
    };

    let result = train_fold(&manifest, 0, &net_cfg, &train_cfg, &PreprocessConfig::default())?;
    println!("epoch    lr        train_loss  val_dice");
    for row in &result.history {
        println!(
            "{:5}  {:.2e}  {:9.4}   {}",
            row.epoch,
            row.lr,
            row.train_loss,
            row.val_dice.map(|d| format!("{d:.4}")).unwrap_or_default()
        );
    }
    println!(
        "best validation dice {:.4}; checkpoint at {}",
        result.best_val_dice,
        result.checkpoint_path.display()
    );
    Ok(())
}
