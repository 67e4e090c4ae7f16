//! End-to-end training flows at toy scale: artifact layout, resume,
//! paradigm wiring, checkpoint stripping and rerun determinism.

use std::path::Path;

use ssad_core::checkpoint::{load_checkpoint, strip_for_inference};
use ssad_core::image::ImageBuffer;
use ssad_core::mask::generate_mask;
use ssad_core::synth::{category_table, synthesize_toy_dataset};
use ssad_core::trainer::{
    train, Dataset, EffectiveWeights, Paradigm, SsadModel, TrainConfig, Trainer,
};
use ssad_core::InferenceModelF32;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        image_size: 64,
        encoder_width: 8,
        lr_drop_epochs: vec![],
        seed: 3,
        ..TrainConfig::default()
    }
}

fn tiny_dataset(n: usize, seed: u64) -> Dataset<f32> {
    let (images, records) = synthesize_toy_dataset::<f32>(n, 64, 3, seed).unwrap();
    Dataset::from_memory(&images, &records, category_table(3), 64, 32).unwrap()
}

fn log_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn ssad_run_writes_logs_checkpoint_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(8, 1);
    let config = tiny_config();
    let outcome = train(&dataset, &config, dir.path()).unwrap();

    assert_eq!(outcome.phases.len(), 1);
    assert_eq!(outcome.paradigm, Paradigm::Ssad);
    let rows = log_lines(&dir.path().join("epochs.jsonl"));
    assert_eq!(rows.len(), config.epochs);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row["epoch"], serde_json::json!(i + 1));
        for key in ["lr_det", "lr_recon", "recon", "tc_align", "tc_gather", "det_cls", "det_reg", "total"] {
            assert!(row[key].is_number(), "epoch {} field {key} should be numeric", i + 1);
        }
    }

    let ck = load_checkpoint(&outcome.final_checkpoint).unwrap();
    assert_eq!(ck.epoch, config.epochs);
    assert_eq!(ck.n_categories, 3);
    assert!(ck.params.keys().any(|k| k.starts_with("enc.")));
    assert!(ck.params.keys().any(|k| k.starts_with("dec.")));
    assert!(ck.params.keys().any(|k| k.starts_with("det.")));
    assert!(ck.rng.is_some());
    assert!(dir.path().join("timing.json").exists());
}

#[test]
fn detection_only_logs_null_reconstruction_fields() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(8, 1);
    let config = TrainConfig {
        paradigm: Paradigm::DetectionOnly,
        ..tiny_config()
    };
    train(&dataset, &config, dir.path()).unwrap();
    for row in log_lines(&dir.path().join("epochs.jsonl")) {
        for key in ["recon", "tc_align", "tc_gather"] {
            assert!(row[key].is_null(), "{key} must be null under detection_only");
        }
        assert!(row["det_cls"].is_number() && row["det_reg"].is_number());
    }
}

#[test]
fn ssl_then_ft_produces_two_phases_with_adopted_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(8, 1);
    let config = TrainConfig {
        paradigm: Paradigm::SslThenFt,
        ssl_epochs: Some(1),
        ..tiny_config()
    };
    let outcome = train(&dataset, &config, dir.path()).unwrap();

    assert_eq!(outcome.phases.len(), 2);
    assert_eq!(outcome.phases[0].label, "ssl_pretrain");
    assert_eq!(outcome.phases[0].epochs, 1);
    assert_eq!(outcome.phases[1].label, "detection_finetune");
    assert_eq!(outcome.phases[1].epochs, config.epochs);
    // The total is end-to-end wall clock: at least the phase loops, plus
    // the checkpoint hand-off between them.
    let phase_sum: f64 = outcome.phases.iter().map(|p| p.seconds).sum();
    assert!(outcome.total_seconds >= phase_sum);

    // Phase 1 trains only the reconstruction side.
    for row in log_lines(&dir.path().join("phase1/epochs.jsonl")) {
        assert!(row["recon"].is_number() && row["det_cls"].is_null());
    }
    for row in log_lines(&dir.path().join("phase2/epochs.jsonl")) {
        assert!(row["recon"].is_null() && row["det_cls"].is_number());
    }
    assert!(outcome.final_checkpoint.exists());

    // Adopting the pretrain checkpoint copies exactly the encoder group.
    let p1 = load_checkpoint(&dir.path().join("phase1/checkpoint.json")).unwrap();
    let weights = EffectiveWeights { recon: 0.0, tc: 0.0, cls: 1.0, reg: 1.0 };
    let mut fresh: Trainer<f32> = Trainer::new(&config, 3, 1, weights).unwrap();
    fresh.adopt_encoder(&p1).unwrap();
    let ids: Vec<_> = fresh.model.store.ids().collect();
    let exported = fresh.model.store.export(&ids);
    for (name, (shape, values)) in &exported {
        if name.starts_with("enc.") {
            assert_eq!((shape, values), (&p1.params[name].0, &p1.params[name].1));
        }
    }
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let dataset = tiny_dataset(8, 2);
    let config = TrainConfig { epochs: 4, ..tiny_config() };
    let weights = EffectiveWeights::for_paradigm(&config, Paradigm::Ssad);

    let mut straight: Trainer<f32> = Trainer::new(&config, 3, 1, weights).unwrap();
    let mut straight_losses = Vec::new();
    for _ in 0..4 {
        straight_losses.push(straight.run_epoch(&dataset).unwrap());
    }

    let mut first: Trainer<f32> = Trainer::new(&config, 3, 1, weights).unwrap();
    let mut resumed_losses = Vec::new();
    for _ in 0..2 {
        resumed_losses.push(first.run_epoch(&dataset).unwrap());
    }
    let ck = first.checkpoint(&dataset.categories);
    drop(first);
    let mut second = Trainer::<f32>::restore(&ck, weights).unwrap();
    for _ in 0..2 {
        resumed_losses.push(second.run_epoch(&dataset).unwrap());
    }

    assert_eq!(straight_losses, resumed_losses);
    let ids: Vec<_> = straight.model.store.ids().collect();
    assert_eq!(
        straight.model.store.export(&ids),
        second.model.store.export(&ids),
        "parameter trajectories must be bit-identical after resume"
    );
}

#[test]
fn zero_weight_joint_run_matches_detection_only_exactly() {
    let dataset = tiny_dataset(8, 5);
    let base = tiny_config();
    let zeroed = TrainConfig {
        w_recon: 0.0,
        w_tc: 0.0,
        paradigm: Paradigm::Ssad,
        ..base.clone()
    };
    let det_only = TrainConfig {
        paradigm: Paradigm::DetectionOnly,
        ..base
    };

    let wa = EffectiveWeights::for_paradigm(&zeroed, Paradigm::Ssad);
    let wb = EffectiveWeights::for_paradigm(&det_only, Paradigm::DetectionOnly);
    let mut a: Trainer<f32> = Trainer::new(&zeroed, 3, 1, wa).unwrap();
    let mut b: Trainer<f32> = Trainer::new(&det_only, 3, 1, wb).unwrap();
    for _ in 0..2 {
        let la = a.run_epoch(&dataset).unwrap();
        let lb = b.run_epoch(&dataset).unwrap();
        assert_eq!(la, lb);
        assert!(la.recon.is_none() && la.tc_align.is_none());
    }
    let ids: Vec<_> = a.model.store.ids().collect();
    assert_eq!(a.model.store.export(&ids), b.model.store.export(&ids));
}

#[test]
fn stripped_checkpoint_detects_identically_to_full() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(8, 7);
    let config = TrainConfig { epochs: 1, ..tiny_config() };
    let outcome = train(&dataset, &config, dir.path()).unwrap();

    let full = load_checkpoint(&outcome.final_checkpoint).unwrap();
    let stripped = strip_for_inference(&full);
    assert!(stripped.params.len() < full.params.len());

    let m_full = InferenceModelF32::from_checkpoint(&full).unwrap();
    let m_stripped = InferenceModelF32::from_checkpoint(&stripped).unwrap();
    let (probe_images, _) = synthesize_toy_dataset::<f32>(10, 64, 3, 99).unwrap();
    for img in &probe_images {
        let a = m_full.detect(img, 0.05, 0.5).unwrap();
        let b = m_stripped.detect(img, 0.05, 0.5).unwrap();
        assert_eq!(a.len(), b.len());
        for (da, db) in a.iter().zip(&b) {
            assert_eq!(da.score.to_bits(), db.score.to_bits());
            assert_eq!(da.bbox.x_min.to_bits(), db.bbox.x_min.to_bits());
            assert_eq!(da.bbox.y_max.to_bits(), db.bbox.y_max.to_bits());
            assert_eq!(da.bbox.category_id, db.bbox.category_id);
        }
    }
}

#[test]
fn rerun_with_same_config_is_byte_identical() {
    let dataset = tiny_dataset(8, 4);
    let config = tiny_config();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&dataset, &config, d1.path()).unwrap();
    train(&dataset, &config, d2.path()).unwrap();
    for name in ["epochs.jsonl", "checkpoint.json"] {
        let a = std::fs::read(d1.path().join(name)).unwrap();
        let b = std::fs::read(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} must be byte-identical across reruns");
    }
}

#[test]
fn joint_gradients_match_finite_differences() {
    let config = TrainConfig {
        seed: 11,
        image_size: 64,
        encoder_width: 8,
        epochs: 1,
        lr_drop_epochs: vec![],
        ..TrainConfig::default()
    };
    let (images, records) = synthesize_toy_dataset::<f64>(2, 64, 3, 21).unwrap();
    let mut model: SsadModel<f64> = SsadModel::new(&config, 3, 1, true).unwrap();
    let weights = EffectiveWeights { recon: 1.0, tc: 1.0, cls: 1.0, reg: 1.0 };
    let masks: Vec<_> = (0..2)
        .map(|i| generate_mask(2, 2, 32, 0.6, 1000 + i).unwrap())
        .collect();

    let image_refs: Vec<&ImageBuffer<f64>> = images.iter().collect();
    let record_refs: Vec<_> = records.iter().collect();
    model.store.zero_grads();
    model
        .joint_forward_backward(&image_refs, &record_refs, Some(&masks), &weights, true)
        .unwrap();

    // One weight + one bias probed per parameter tensor, every group.
    let ids: Vec<_> = model.store.ids().collect();
    let mut checked = 0;
    for id in ids {
        let n = model.store.value(id).len();
        for &k in &[0, n - 1] {
            let analytic = model.store.grad(id)[k];
            let eps = 1e-5;
            let orig = model.store.value(id)[k];
            let eval = |v: f64, model: &mut SsadModel<f64>| {
                model.store.value_mut(id)[k] = v;
                let b = model
                    .joint_forward_backward(&image_refs, &record_refs, Some(&masks), &weights, false)
                    .unwrap();
                b.total
            };
            let plus = eval(orig + eps, &mut model);
            let minus = eval(orig - eps, &mut model);
            model.store.value_mut(id)[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let tol = 1e-5 + 1e-3 * analytic.abs().max(numeric.abs());
            assert!(
                (analytic - numeric).abs() <= tol,
                "{}[{k}]: analytic {analytic} vs numeric {numeric}",
                model.store.name(id)
            );
            checked += 1;
        }
    }
    assert!(checked >= 20, "expected probes across all parameter groups");
}
