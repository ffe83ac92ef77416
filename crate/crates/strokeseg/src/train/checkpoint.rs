//! Checkpoints: weights archive plus optimizer state plus run metadata, all
//! in one tensor-archive file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::segresnet::{NetworkConfig, SegResNet};
use crate::nn::weights::{load_into, network_sections, write_archive, Archive};

use super::optim::AdamW;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    /// Last completed epoch (training resumes at epoch + 1).
    pub epoch: usize,
    pub step_count: u64,
    pub val_dice: Option<f64>,
    pub best_val_dice: f64,
    pub config_hash: String,
    pub history: Vec<EpochStats>,
}

pub fn save_checkpoint(
    net: &mut SegResNet<f32>,
    opt: &AdamW,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let cfg = net.cfg.clone();
    let mut sections = network_sections(net);
    sections.extend(opt.state_sections());
    let meta_json = serde_json::to_value(meta)
        .map_err(|e| Error::Weights(format!("checkpoint metadata: {e}")))?;
    write_archive(path, &cfg, &sections, serde_json::json!({"kind": "checkpoint", "train": meta_json}))
}

pub struct LoadedCheckpoint {
    pub net: SegResNet<f32>,
    pub meta: CheckpointMeta,
}

/// Strictly restore network weights; optimizer state is copied into `opt`.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    cfg: &NetworkConfig,
    opt: &mut AdamW,
) -> Result<LoadedCheckpoint> {
    use rand::SeedableRng;
    let archive = Archive::read(&path)?;
    let meta: CheckpointMeta = serde_json::from_value(archive.meta["train"].clone())
        .map_err(|e| Error::Weights(format!("checkpoint metadata: {e}")))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut net = SegResNet::<f32>::build(cfg.clone(), &mut rng)?;
    load_into(&mut net, &archive, true).map_err(|e| {
        Error::Weights(format!(
            "checkpoint {} does not match the network: {e}",
            path.as_ref().display()
        ))
    })?;
    let names: Vec<String> = net.param_inventory().into_iter().map(|(n, _)| n).collect();
    opt.restore_state(
        meta.step_count,
        |name| archive.tensor(name).map(|(_, v)| v.to_vec()),
        &names,
    );
    Ok(LoadedCheckpoint { net, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_preserves_weights_optimizer_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetworkConfig {
            init_filters: 4,
            blocks_down: vec![1, 1],
            blocks_up: vec![1],
            ds_heads: 1,
            ..NetworkConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = SegResNet::<f32>::build(cfg.clone(), &mut rng).unwrap();
        let mut opt = AdamW::new(1e-5);
        // produce some optimizer state
        net.for_each_param(&mut |p| {
            for (i, g) in p.grad.iter_mut().enumerate() {
                *g = (i as f32 * 0.01).sin();
            }
        });
        opt.step(&mut net, 1e-3);

        let meta = CheckpointMeta {
            epoch: 7,
            step_count: opt.step_count,
            val_dice: Some(0.5),
            best_val_dice: 0.6,
            config_hash: "abc".into(),
            history: vec![EpochStats {
                epoch: 7,
                lr: 1e-3,
                train_loss: 0.4,
                val_dice: Some(0.5),
            }],
        };
        let path = dir.path().join("latest.ckpt");
        save_checkpoint(&mut net, &opt, &meta, &path).unwrap();

        let mut opt2 = AdamW::new(1e-5);
        let loaded = load_checkpoint(&path, &cfg, &mut opt2).unwrap();
        assert_eq!(loaded.meta.epoch, 7);
        assert_eq!(loaded.meta.history.len(), 1);
        assert_eq!(opt2.step_count, opt.step_count);

        // Equal gradients must now produce identical next steps.
        let mut net_a = loaded.net;
        let mut net_b = net;
        for n in [&mut net_a, &mut net_b] {
            n.for_each_param(&mut |p| {
                for (i, g) in p.grad.iter_mut().enumerate() {
                    *g = (i as f32 * 0.02).cos();
                }
            });
        }
        opt.step(&mut net_b, 5e-4);
        opt2.step(&mut net_a, 5e-4);
        let mut params_b = Vec::new();
        net_b.for_each_param(&mut |p| params_b.push(p.value.to_vec()));
        let mut i = 0;
        let mut max_diff = 0.0f32;
        net_a.for_each_param(&mut |p| {
            for (a, b) in p.value.iter().zip(&params_b[i]) {
                max_diff = max_diff.max((a - b).abs());
            }
            i += 1;
        });
        assert!(max_diff < 1e-7, "post-resume step diverged by {max_diff}");
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetworkConfig {
            init_filters: 4,
            blocks_down: vec![1, 1],
            blocks_up: vec![1],
            ds_heads: 1,
            ..NetworkConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = SegResNet::<f32>::build(cfg, &mut rng).unwrap();
        let opt = AdamW::new(0.0);
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&mut net, &opt, &CheckpointMeta::default(), &path).unwrap();

        let other = NetworkConfig {
            init_filters: 8,
            blocks_down: vec![1, 1],
            blocks_up: vec![1],
            ds_heads: 1,
            ..NetworkConfig::default()
        };
        let mut opt2 = AdamW::new(0.0);
        assert!(load_checkpoint(&path, &other, &mut opt2).is_err());
    }
}
