use std::fs;

use dca_tensor::Tensor;
use dcanet::config::ExperimentConfig;
use dcanet::data::SynthSpec;
use dcanet::experiment::{train_and_evaluate, Splits};
use dcanet::infer::evaluate;
use dcanet::train::{train, RunOutput, LOG_FILE};
use dcanet::viz::{export_masks, VizOptions};
use dcanet::{DcaError, Model, StructureKind};

fn tiny(kind: StructureKind, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().with_structure(kind).with_seed(seed);
    cfg.model.structure.width = 8;
    cfg.model.structure.semantic_width = 8;
    cfg.model.aux_width = 16;
    cfg.data.train = SynthSpec { num_images: 16, image_size: 32, seed: 0, ..SynthSpec::default() };
    cfg.data.val = SynthSpec { num_images: 6, image_size: 32, seed: 1, ..SynthSpec::default() };
    cfg.train.max_iter = 50;
    cfg
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn loss_on_a_fixed_batch_goes_down_in_most_seeds() {
    // One batch worth of images and no augmentation: every step sees the same batch.
    let mut cfg = tiny(StructureKind::Cascade, 0);
    cfg.data.train.num_images = cfg.train.batch_size;
    cfg.train.augment.enabled = false;
    let splits = Splits::from_config(&cfg).unwrap();
    let mut drops = Vec::new();
    for seed in 0..3 {
        let run = train_and_evaluate(&cfg.clone().with_seed(seed), &splits, None).unwrap();
        let totals: Vec<f64> = run.summary.losses.iter().map(|l| l.total).collect();
        assert_eq!(totals.len(), 50);
        drops.push(mean(&totals[..5]) - mean(&totals[45..]));
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "loss drops per seed: {drops:?}");
}

#[test]
fn training_beats_an_untrained_model_on_its_own_data() {
    let mut cfg = tiny(StructureKind::Cascade, 3);
    cfg.train.max_iter = 80;
    cfg.train.augment.enabled = false;
    let splits = Splits::from_config(&cfg).unwrap();
    let untrained = Model::build(&cfg.model, 3).unwrap();
    let before = evaluate(&untrained, &splits.train, &[1.0], 8).unwrap().mean_iou().unwrap();
    let run = train_and_evaluate(&cfg, &splits, None).unwrap();
    let after = evaluate(&run.model, &splits.train, &[1.0], 8).unwrap().mean_iou().unwrap();
    assert!(after > before + 0.05, "untrained {before:.3}, trained {after:.3}");
}

#[test]
fn identical_runs_produce_identical_artifacts() {
    let cfg = tiny(StructureKind::Pyramid, 7);
    let splits = Splits::from_config(&cfg).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs.iter().map(|d| train_and_evaluate(&cfg, &splits, Some(d.path())).unwrap()).collect();
    let digest = runs[0].summary.final_digest.clone().unwrap();
    assert_eq!(runs[1].summary.final_digest.as_deref(), Some(digest.as_str()));
    let logs: Vec<Vec<u8>> = dirs.iter().map(|d| fs::read(d.path().join(LOG_FILE)).unwrap()).collect();
    assert!(!logs[0].is_empty());
    assert_eq!(logs[0], logs[1]);
    assert_eq!(runs[0].report, runs[1].report);

    // A different seed changes the weights.
    let other = train_and_evaluate(&cfg.clone().with_seed(8), &splits, Some(tempfile::tempdir().unwrap().path())).unwrap();
    assert_ne!(other.summary.final_digest.unwrap(), digest);
}

#[test]
fn divergence_aborts_with_a_pointer_to_the_last_checkpoint() {
    let mut cfg = tiny(StructureKind::Cascade, 0);
    cfg.train.base_lr = 1e12;
    cfg.train.momentum = 0.0;
    cfg.train.checkpoint_every = 1;
    let splits = Splits::from_config(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::build(&cfg.model, 0).unwrap();
    let output = RunOutput { dir: Some(dir.path().to_path_buf()), config: serde_json::to_value(&cfg).unwrap() };
    match train(&mut model, &splits.train, &cfg.train, &output) {
        Err(DcaError::NonFiniteLoss { iteration, last_good }) => {
            assert!(iteration >= 1, "diverged before any checkpoint");
            let path = last_good.expect("checkpoint pointer");
            assert!(path.exists(), "{} missing", path.display());
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn config_round_trips_through_json() {
    let cfg = tiny(StructureKind::Pyramid, 5);
    let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.digest(), cfg.digest());
    let tweaked = cfg.with_overrides(&["train.base_lr=0.02", "model.structure.kind=crs"]).unwrap();
    assert_eq!(tweaked.train.base_lr, 0.02);
    assert_eq!(tweaked.model.structure.kind, StructureKind::Crs);
    assert_ne!(tweaked.digest(), cfg.digest());
    assert!(cfg.with_overrides(&["train.no_such_field=1"]).is_err());
    assert!(ExperimentConfig::from_json("{\"train\": {\"base_lr\": -1}}").is_err());
}

#[test]
fn mask_export_writes_one_file_per_module() {
    let image = Tensor::from_fn(&[3, 32, 32], |i| (i % 7) as f32 / 7.0);
    for (kind, expected) in [(StructureKind::Cascade, 4), (StructureKind::Pyramid, 8)] {
        let cfg = tiny(kind, 0);
        let model = Model::build(&cfg.model, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = export_masks(&model, &image, dir.path(), &VizOptions::default()).unwrap();
        assert_eq!(out.masks.len(), expected);
        assert!(out.masks.iter().all(|p| p.exists()));
        assert!(out.prediction.exists());
    }
    let cfg = tiny(StructureKind::None, 0);
    let model = Model::build(&cfg.model, 0).unwrap();
    assert!(export_masks(&model, &image, tempfile::tempdir().unwrap().path(), &VizOptions::default()).is_err());
}
