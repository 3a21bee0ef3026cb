mod common;

use dualpath_core::manifest::load_manifest;
use dualpath_core::model::{Model, ModelConfig};
use dualpath_core::synth::{synth_dataset, SynthSpec};
use dualpath_core::train::{
    ablation_sweep, dataset_loss, evaluate, kfold_splits, train, train_step, write_run, AblationAxis, Dataset,
    EvalReport, Preset, TrainConfig,
};
use dualpath_tensor::{Adam, AdamConfig};

fn small_dataset(n: usize, seed: u64) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_videos: n,
        seed,
        ..SynthSpec::default()
    };
    let out = synth_dataset(&spec, dir.path()).unwrap();
    let cfg = TrainConfig::preset(Preset::Toy);
    let data = Dataset::load(&load_manifest(&out.manifest_path).unwrap(), &cfg.frontend).unwrap();
    (dir, data)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::preset(Preset::Toy)
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (_d, data) = small_dataset(20, 1);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..quick(2)
    };
    let out = train(&cfg, &data).unwrap();
    let fresh = Model::new(cfg.seeded_model()).unwrap();
    for (a, b) in out.last.params().values().iter().zip(fresh.params().values()) {
        assert!(a.bit_eq(b));
    }
}

#[test]
fn same_seed_same_bits() {
    let (_d, data) = small_dataset(20, 2);
    let cfg = TrainConfig { seed: 7, ..quick(2) };
    let (a, b) = (train(&cfg, &data).unwrap(), train(&cfg, &data).unwrap());
    assert!(a.last.to_checkpoint().bit_eq(&b.last.to_checkpoint()));
    assert!(a.best.to_checkpoint().bit_eq(&b.best.to_checkpoint()));
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    assert_eq!(a.log.best_epoch, b.log.best_epoch);

    let other = train(&TrainConfig { seed: 8, ..cfg }, &data).unwrap();
    assert!(!other.last.to_checkpoint().bit_eq(&a.last.to_checkpoint()));
}

#[test]
fn fixed_batch_loss_descends_for_ten_steps() {
    let model_cfg = ModelConfig::toy();
    let mut model = Model::new(model_cfg).unwrap();
    let (batch, target) = common::random_batch(model.config(), 4, 6, 40, 3);
    let mut adam = Adam::new(
        AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        model.params().values(),
    );
    let mut losses = Vec::new();
    for _ in 0..11 {
        losses.push(train_step(&mut model, &mut adam, &batch, &target, 0.5).unwrap().0);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn clipping_shrinks_updates() {
    let (batch, target) = common::random_batch(&ModelConfig::toy(), 2, 5, 30, 4);
    let step = |clip: f64| {
        let mut model = Model::new(ModelConfig::toy()).unwrap();
        let before = model.params().values().to_vec();
        let mut adam = Adam::new(AdamConfig::default(), model.params().values());
        let (_, norm) = train_step(&mut model, &mut adam, &batch, &target, clip).unwrap();
        let delta: f64 = model
            .params()
            .values()
            .iter()
            .zip(&before)
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        (delta, norm)
    };
    let (free, norm) = step(f64::INFINITY);
    let (clipped, _) = step(1e-9);
    assert!(norm > 1e-9);
    // Adam normalizes per element, so the shrink comes from eps dominating the clipped moments
    assert!(clipped < free * 0.1, "{clipped} vs {free}");
}

#[test]
fn training_reduces_loss_on_synthetic_data() {
    let (_d, data) = small_dataset(30, 3);
    let cfg = quick(4);
    let idx = data.split("train");
    let initial = dataset_loss(&Model::new(cfg.seeded_model()).unwrap(), &data, &idx).unwrap();
    let out = train(&cfg, &data).unwrap();
    let last = dataset_loss(&out.last, &data, &idx).unwrap();
    assert!(last < initial, "{last} >= {initial}");
    assert_eq!(out.log.epochs.len(), 4);
    assert!(out.log.epochs.iter().all(|e| e.val.is_some() && e.config_hash == cfg.hash()));
}

#[test]
fn evaluation_is_pure_and_oracles_score_perfectly() {
    let (_d, data) = small_dataset(12, 4);
    let model = Model::new(ModelConfig::toy()).unwrap();
    let idx: Vec<usize> = (0..data.videos.len()).collect();
    let (a, b) = (evaluate(&model, &data, &idx).unwrap(), evaluate(&model, &data, &idx).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.jsonl().lines().count(), idx.len() + 1);

    let oracle = EvalReport::from_scores(
        data.videos
            .iter()
            .map(|v| (v.id.clone(), v.gt.as_slice(), v.gt.as_slice())),
    )
    .unwrap();
    let m = oracle.summary.mean;
    assert_eq!([m.f1, m.map50, m.rho, m.tau], [Some(1.0); 4]);
    assert!(oracle.table().lines().next().unwrap().contains("F1"));
}

#[test]
fn ablation_tables_have_one_row_per_variant() {
    let (_d, data) = small_dataset(16, 5);
    let base = quick(1);
    for (axis, rows) in [(AblationAxis::Modality, 7), (AblationAxis::Fusion, 4)] {
        let t = ablation_sweep(&base, &data, axis).unwrap();
        assert_eq!(t.rows.len(), rows);
        let hashes: std::collections::HashSet<_> = t.rows.iter().map(|r| r.config_hash.clone()).collect();
        assert_eq!(hashes.len(), rows);
        let text = t.format();
        assert_eq!(text.lines().count(), rows + 1);
        for col in ["F1", "mAP50", "mAP15", "rho", "tau"] {
            assert!(text.lines().next().unwrap().contains(col));
        }
    }
}

#[test]
fn kfold_partitions_fifty_videos() {
    let folds = kfold_splits(50, 5, 11).unwrap();
    let mut seen = [0usize; 5];
    for &f in &folds {
        seen[f] += 1;
    }
    assert_eq!(seen, [10; 5]);
    assert_eq!(folds, kfold_splits(50, 5, 11).unwrap());
    assert_ne!(folds, kfold_splits(50, 5, 12).unwrap());
}

#[test]
fn run_directory_contents() {
    let (_d, data) = small_dataset(12, 6);
    let out = train(&quick(1), &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &out).unwrap();
    for f in ["best.dvhd", "last.dvhd", "runlog.jsonl", "timing.jsonl"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let back = Model::load(&dir.path().join("best.dvhd")).unwrap();
    assert!(back == out.best);
}

#[test]
fn diverging_run_reports_non_finite_loss() {
    let (_d, data) = small_dataset(12, 7);
    let cfg = TrainConfig {
        learning_rate: 1e200,
        clip_norm: f64::INFINITY,
        ..quick(3)
    };
    let err = train(&cfg, &data).unwrap_err();
    assert!(matches!(err, dualpath_core::Error::NonFiniteLoss { .. }), "{err}");
    assert!(err.is_numerical());
}
