//! Run configuration: one strict-schema JSON document nesting every
//! module's settings. Unknown keys fail fast so hyperparameter typos
//! cannot pass silently; defaults follow the published training recipe
//! (1000 epochs, lr 2e-4, weight decay 1e-5, 192x192x128 crops, 5 folds,
//! 32 initial filters, stage blocks [2,4,4,4,4]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::infer::InferenceConfig;
use crate::metrics::{Connectivity, LesionMatching};
use crate::nn::segresnet::NetworkConfig;
use crate::preprocess::PreprocessConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub connectivity: Connectivity,
    pub matching: LesionMatching,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Dataset manifest; relative paths resolve against this file's parent.
    pub manifest: PathBuf,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub inference: InferenceConfig,
    pub evaluation: EvalConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        if self.manifest.as_os_str().is_empty() {
            return Err(Error::Config("manifest path is required".into()));
        }
        Ok(())
    }

    /// Hex digest of the fully-resolved configuration.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes)
            .iter()
            .fold(String::new(), |mut acc, b| {
                acc.push_str(&format!("{b:02x}"));
                acc
            })
    }

    /// Persist the resolved config and its hash next to run outputs.
    pub fn echo_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("resolved_config.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
        let hash_path = dir.join("config_hash.txt");
        std::fs::write(&hash_path, self.content_hash()).map_err(|e| Error::io(&hash_path, e))
    }
}

/// Load and validate a config file; relative manifest/checkpoint paths are
/// resolved against the file's directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: PipelineConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    if cfg.manifest.is_relative() {
        cfg.manifest = base.join(&cfg.manifest);
    }
    if cfg.train.checkpoint_dir.is_relative() {
        cfg.train.checkpoint_dir = base.join(&cfg.train.checkpoint_dir);
    }
    if let Some(p) = cfg.train.pretrained_weights.as_mut() {
        if p.is_relative() {
            *p = base.join(&p);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
