//! `bench-extractors`: train one joint run per registered texture
//! extractor and report detection AP side by side. Registry entries
//! without bundled weights appear as `unavailable` rows instead of
//! failing the command.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use ssad_core::error::Error;
use ssad_core::texture::{create_extractor, extractor_names};
use ssad_core::trainer::{train, Paradigm};

use crate::config::{config_hash, load_config};
use crate::manifest::{LockGuard, RunManifest};

use super::compare::evaluate_checkpoint;
use super::{load_dataset, write_json, CliError, CmdResult};

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML config; the [train] section is the shared budget.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training split directory.
    #[arg(long)]
    pub train_dataset: PathBuf,
    /// Held-out evaluation split directory.
    #[arg(long)]
    pub test_dataset: PathBuf,
    /// Output directory (per-extractor runs + bench.json).
    #[arg(long)]
    pub out: PathBuf,
    /// Override the shared training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Take over a stale lock on the output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub extractor: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap75: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap50_95: Option<f64>,
}

pub fn run(args: &BenchArgs) -> CmdResult {
    let mut fc = load_config(args.config.as_deref()).map_err(|e| CliError::Usage(format!("{e:#}")))?;
    if let Some(seed) = args.seed {
        fc.train.seed = seed;
    }
    fc.train.paradigm = Paradigm::Ssad;
    fc.train
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let _lock = LockGuard::acquire(&args.out, args.force)?;
    let manifest = RunManifest::begin(
        "bench-extractors",
        args.config.as_deref(),
        config_hash(&fc)?,
        fc.train.seed,
        &args.out,
    );

    let train_set = load_dataset(&args.train_dataset, fc.train.image_size, fc.train.patch_size)?;
    let test_set = load_dataset(&args.test_dataset, fc.train.image_size, fc.train.patch_size)?;
    let channels = train_set.images.first().map(|i| i.channels).unwrap_or(1);

    let mut rows = Vec::new();
    for name in extractor_names() {
        match create_extractor::<f32>(name, channels, 0) {
            Err(Error::ExtractorUnavailable { reason, .. }) => {
                println!("{name}: unavailable ({reason})");
                rows.push(BenchRow {
                    extractor: name.to_string(),
                    status: "unavailable".into(),
                    reason: Some(reason),
                    ap50: None,
                    ap75: None,
                    ap50_95: None,
                });
            }
            Err(e) => return Err(CliError::Runtime(e.into())),
            Ok(_) => {
                println!("== extractor {name} ==");
                let mut config = fc.train.clone();
                config.extractor = name.to_string();
                let run_dir = args.out.join("runs").join(name);
                let outcome = train(&train_set, &config, &run_dir)?;
                let report = evaluate_checkpoint(&outcome.final_checkpoint, &test_set, &config)?;
                println!("  AP50 {:.4}  AP50:95 {:.4}", report.ap50, report.ap50_95);
                rows.push(BenchRow {
                    extractor: name.to_string(),
                    status: "ok".into(),
                    reason: None,
                    ap50: Some(report.ap50),
                    ap75: Some(report.ap75),
                    ap50_95: Some(report.ap50_95),
                });
            }
        }
    }

    write_json(&rows, &args.out.join("bench.json"))?;
    let mut text = format!("{:<10} {:<12} {:>8} {:>8} {:>8}\n", "extractor", "status", "AP50", "AP75", "AP50:95");
    for r in &rows {
        text.push_str(&format!(
            "{:<10} {:<12} {:>8} {:>8} {:>8}\n",
            r.extractor,
            r.status,
            r.ap50.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.ap75.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.ap50_95.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        ));
    }
    std::fs::write(args.out.join("bench.txt"), &text).map_err(anyhow::Error::from)?;
    print!("{text}");
    manifest.finish()?;
    Ok(())
}
