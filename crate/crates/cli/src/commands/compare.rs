//! `compare-paradigms`: train the three paradigms plus the no-TC ablation
//! under one budget, evaluate each on a held-out split, and emit the
//! comparison table as JSON + CSV + aligned text.
//!
//! Metrics go to `comparison.{json,csv,txt}` (deterministic); wall-clock
//! accounting goes to `comparison_timing.json` (machine-dependent).

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use ssad_core::checkpoint::load_checkpoint;
use ssad_core::metrics::MetricReport;
use ssad_core::trainer::{train, Dataset, Paradigm, TrainConfig};
use ssad_core::InferenceModelF32;

use crate::config::{config_hash, load_config};
use crate::manifest::{LockGuard, RunManifest};

use super::{load_dataset, write_json, CliError, CmdResult};

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// TOML config; the [train] section is the shared budget.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training split directory.
    #[arg(long)]
    pub train_dataset: PathBuf,
    /// Held-out evaluation split directory.
    #[arg(long)]
    pub test_dataset: PathBuf,
    /// Output directory (per-variant runs + the comparison table).
    #[arg(long)]
    pub out: PathBuf,
    /// Override the shared training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Take over a stale lock on the output directory.
    #[arg(long)]
    pub force: bool,
}

/// One table row; metric fields mirror MetricReport's headline numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub paradigm: String,
    pub with_tc: bool,
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
    pub paper_auc: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub seed: u64,
    pub epochs: usize,
    pub n_train_images: usize,
    pub n_test_images: usize,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Serialize)]
struct TimingRow {
    label: String,
    total_seconds: f64,
    phase_seconds: Vec<f64>,
}

/// The four standard variants, in presentation order.
pub fn variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut out = Vec::new();
    let mut det = base.clone();
    det.paradigm = Paradigm::DetectionOnly;
    out.push(("detection_only".to_string(), det));
    let mut ssl = base.clone();
    ssl.paradigm = Paradigm::SslThenFt;
    out.push(("ssl_then_ft".to_string(), ssl));
    let mut ssad = base.clone();
    ssad.paradigm = Paradigm::Ssad;
    out.push(("ssad".to_string(), ssad));
    let mut no_tc = base.clone();
    no_tc.paradigm = Paradigm::Ssad;
    no_tc.w_tc = 0.0;
    out.push(("ssad_no_tc".to_string(), no_tc));
    out
}

fn row_from_report(label: &str, config: &TrainConfig, report: &MetricReport) -> ComparisonRow {
    ComparisonRow {
        label: label.to_string(),
        paradigm: config.paradigm.as_str().to_string(),
        with_tc: config.paradigm != Paradigm::DetectionOnly && config.w_tc != 0.0,
        ap50: report.ap50,
        ap75: report.ap75,
        ap50_95: report.ap50_95,
        paper_auc: report.paper_auc,
        specificity: report.specificity,
    }
}

pub fn evaluate_checkpoint(
    checkpoint: &std::path::Path,
    test: &Dataset<f32>,
    config: &TrainConfig,
) -> anyhow::Result<MetricReport> {
    let ck = load_checkpoint(checkpoint)?;
    let model = InferenceModelF32::from_checkpoint(&ck)?;
    let (_, report) = model.evaluate(
        test,
        config.det_score_threshold,
        config.nms_iou,
        config.score_threshold,
    )?;
    Ok(report)
}

pub fn run(args: &CompareArgs) -> CmdResult {
    let mut fc = load_config(args.config.as_deref()).map_err(|e| CliError::Usage(format!("{e:#}")))?;
    if let Some(seed) = args.seed {
        fc.train.seed = seed;
    }
    fc.train
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let _lock = LockGuard::acquire(&args.out, args.force)?;
    let manifest = RunManifest::begin(
        "compare-paradigms",
        args.config.as_deref(),
        config_hash(&fc)?,
        fc.train.seed,
        &args.out,
    );

    let train_set = load_dataset(&args.train_dataset, fc.train.image_size, fc.train.patch_size)?;
    let test_set = load_dataset(&args.test_dataset, fc.train.image_size, fc.train.patch_size)?;

    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for (label, config) in variants(&fc.train) {
        println!("== {label} ==");
        let run_dir = args.out.join("runs").join(&label);
        let outcome = train(&train_set, &config, &run_dir)?;
        let report = evaluate_checkpoint(&outcome.final_checkpoint, &test_set, &config)?;
        println!(
            "  AP50 {:.4}  AP50:95 {:.4}  ({:.1}s)",
            report.ap50, report.ap50_95, outcome.total_seconds
        );
        rows.push(row_from_report(&label, &config, &report));
        timing.push(TimingRow {
            label,
            total_seconds: outcome.total_seconds,
            phase_seconds: outcome.phases.iter().map(|p| p.seconds).collect(),
        });
    }

    let table = ComparisonTable {
        seed: fc.train.seed,
        epochs: fc.train.epochs,
        n_train_images: train_set.len(),
        n_test_images: test_set.len(),
        rows,
    };
    write_json(&table, &args.out.join("comparison.json"))?;
    std::fs::write(args.out.join("comparison.csv"), to_csv(&table))
        .map_err(anyhow::Error::from)?;
    let text = to_text(&table);
    std::fs::write(args.out.join("comparison.txt"), &text).map_err(anyhow::Error::from)?;
    write_json(&timing, &args.out.join("comparison_timing.json"))?;
    print!("{text}");
    manifest.finish()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

pub fn to_csv(table: &ComparisonTable) -> String {
    let mut out = String::from("label,paradigm,with_tc,ap50,ap75,ap50_95,paper_auc,specificity\n");
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{}\n",
            r.label,
            r.paradigm,
            r.with_tc,
            r.ap50,
            r.ap75,
            r.ap50_95,
            r.paper_auc.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.specificity.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ));
    }
    out
}

pub fn to_text(table: &ComparisonTable) -> String {
    let mut out = format!(
        "paradigm comparison  (seed {}, {} epochs, {} train / {} test images)\n",
        table.seed, table.epochs, table.n_train_images, table.n_test_images
    );
    out.push_str(&format!(
        "{:<16} {:<16} {:>7} {:>8} {:>8} {:>8} {:>9} {:>11}\n",
        "label", "paradigm", "tc", "AP50", "AP75", "AP50:95", "paper_auc", "specificity"
    ));
    for r in &table.rows {
        out.push_str(&format!(
            "{:<16} {:<16} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>9} {:>11}\n",
            r.label,
            r.paradigm,
            if r.with_tc { "yes" } else { "no" },
            r.ap50,
            r.ap75,
            r.ap50_95,
            fmt_opt(r.paper_auc),
            fmt_opt(r.specificity),
        ));
    }
    out
}
