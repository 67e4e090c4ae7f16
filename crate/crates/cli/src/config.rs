//! TOML run configuration: optional `[synth]`, `[train]` and `[eval]`
//! sections, each falling back to its defaults. Unknown keys anywhere are
//! rejected with the offending key named in the error.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ssad_core::synth::SynthParams;
use ssad_core::trainer::TrainConfig;

/// Evaluation-side overrides; unset fields fall back to the checkpoint's
/// training config (or the stock defaults in results mode).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOverrides {
    /// Score threshold for image-level confusion counts.
    pub score_threshold: Option<f64>,
    /// Candidate threshold fed to detection decoding.
    pub det_score_threshold: Option<f64>,
    pub nms_iou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthParams,
    pub train: TrainConfig,
    pub eval: EvalOverrides,
}

/// Load the config file when given, otherwise the defaults.
pub fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let config: FileConfig = toml::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))?;
            Ok(config)
        }
    }
}

/// Hash of the fully resolved configuration (after flag overrides), so a
/// manifest pins the exact run inputs.
pub fn config_hash(config: &FileConfig) -> anyhow::Result<String> {
    let canonical = toml::to_string(config).context("serializing resolved config")?;
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}
