//! Checkpoint serialization: full training state (parameters, optimizer
//! moments, RNG streams) as one JSON document, plus a stripped
//! inference-only variant with the reconstruction decoder removed.
//!
//! All floating-point values survive a save/load cycle exactly: the JSON
//! writer emits shortest-roundtrip decimal forms.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{Paradigm, TrainConfig};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// AdamW first/second moments keyed by parameter name, plus the step
/// counter driving bias correction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimSnapshot {
    pub t: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// The three data-order RNG streams (parameter-init streams are pure
/// functions of the config seed and need no snapshot).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub shuffle: ChaCha8Rng,
    pub mask: ChaCha8Rng,
    pub augment: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Completed epochs at snapshot time.
    pub epoch: usize,
    pub n_categories: usize,
    pub image_channels: usize,
    pub category_names: Vec<String>,
    pub category_raw_ids: Vec<i64>,
    /// name -> (shape, values); covers every live model parameter.
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub opt_enc: OptimSnapshot,
    pub opt_head: OptimSnapshot,
    /// `None` in stripped checkpoints.
    pub rng: Option<RngSnapshot>,
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, ck).map_err(|e| Error::Checkpoint(e.to_string()))?;
    use std::io::Write;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ck.format_version != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
            ck.format_version
        )));
    }
    Ok(ck)
}

/// Produce a deployment checkpoint: reconstruction-decoder parameters are
/// removed, optimizer and RNG state cleared, and the paradigm pinned to
/// detection-only so the loader never expects the training-time extras.
pub fn strip_for_inference(ck: &Checkpoint) -> Checkpoint {
    let params: BTreeMap<String, (Vec<usize>, Vec<f64>)> = ck
        .params
        .iter()
        .filter(|(name, _)| !name.starts_with("dec."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut config = ck.config.clone();
    config.paradigm = Paradigm::DetectionOnly;
    Checkpoint {
        format_version: ck.format_version,
        config,
        epoch: ck.epoch,
        n_categories: ck.n_categories,
        image_channels: ck.image_channels,
        category_names: ck.category_names.clone(),
        category_raw_ids: ck.category_raw_ids.clone(),
        params,
        opt_enc: OptimSnapshot::default(),
        opt_head: OptimSnapshot::default(),
        rng: None,
    }
}
