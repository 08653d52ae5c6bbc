use super::*;
use crate::data::{generate_synthetic, make_folds};

fn desk_geometry() -> Geometry {
    Geometry::new(64, 64, 64).unwrap()
}

fn small_config() -> TrainingConfig {
    TrainingConfig {
        epochs: 4,
        cycle_len: 2,
        warmup_epochs: 2,
        batch_size: 8,
        lr_max: 0.01,
        lr_min: 0.001,
        optimizer: OptimizerKind::Adam,
        seed: 7,
        ..TrainingConfig::default()
    }
}

fn small_split() -> FoldSplit {
    let data = generate_synthetic(32, 64, 3).unwrap();
    let folds = make_folds(&data.ids(), 2, 0).unwrap();
    FoldSplit::from_folds(&data, &folds, 0).unwrap()
}

#[test]
fn cosine_schedule_values() {
    let cfg = TrainingConfig::default();
    assert_eq!(lr_at(0, &cfg).unwrap(), 0.001);
    assert!((lr_at(50, &cfg).unwrap() - 0.001).abs() < 1e-15);
    // Direct evaluation of the closed form at the last epoch of a cycle.
    let expected = 0.0001 + 0.5 * 0.0009 * (1.0 + (PI * 49.0 / 50.0).cos());
    assert!((lr_at(49, &cfg).unwrap() - expected).abs() < 1e-15);
    assert!((lr_at(49, &cfg).unwrap() - 1.0099e-4).abs() < 1e-6);
    for e in 0..150 {
        assert_eq!(lr_at(e, &cfg).unwrap(), lr_at(e + 50, &cfg).unwrap());
    }
    assert!(matches!(lr_at(200, &cfg), Err(Error::Domain(_))));
}

#[test]
fn loss_switches_after_warmup() {
    let cfg = TrainingConfig::default();
    assert_eq!(loss_for_epoch(0, &cfg), LossKind::Bce);
    assert_eq!(loss_for_epoch(49, &cfg), LossKind::Bce);
    assert_eq!(loss_for_epoch(50, &cfg), LossKind::Lovasz);
    let ablation = TrainingConfig {
        warmup_epochs: 0,
        ..cfg
    };
    assert_eq!(loss_for_epoch(0, &ablation), LossKind::Lovasz);
}

#[test]
fn four_snapshots_by_default() {
    let cfg = TrainingConfig::default();
    assert_eq!(snapshot_epochs(&cfg), vec![49, 99, 149, 199]);
    assert_eq!(cfg.snapshot_count(), 4);
}

#[test]
fn config_validation() {
    let ok = TrainingConfig::default();
    ok.validate().unwrap();
    for bad in [
        TrainingConfig { epochs: 210, ..ok.clone() },
        TrainingConfig { warmup_epochs: 250, ..ok.clone() },
        TrainingConfig { batch_size: 0, ..ok.clone() },
        TrainingConfig { lr_min: 0.01, ..ok.clone() },
        TrainingConfig { rounds: 0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn infinite_threshold_survives_json_and_toml() {
    let cfg = TrainingConfig::default();
    let json = serde_json::to_string(&cfg).unwrap();
    assert!(json.contains("\"-inf\""));
    let back: TrainingConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back.thresh, f64::NEG_INFINITY);
    let t: TrainingConfig = toml::from_str("thresh = -0.3\nepochs = 8\ncycle_len = 4").unwrap();
    assert_eq!((t.thresh, t.epochs), (-0.3, 8));
    let t: TrainingConfig = toml::from_str("thresh = -inf").unwrap();
    assert_eq!(t.thresh, f64::NEG_INFINITY);
    assert!(toml::from_str::<TrainingConfig>("epoch = 8").is_err());
}

#[test]
fn derived_seeds_differ_by_context() {
    let a = derive_seed(1, &[0, 0]);
    assert_eq!(a, derive_seed(1, &[0, 0]));
    assert_ne!(a, derive_seed(1, &[0, 1]));
    assert_ne!(a, derive_seed(1, &[1, 0]));
    assert_ne!(a, derive_seed(2, &[0, 0]));
}

#[test]
fn sgd_step_matches_hand_computation() {
    use crate::nn::Param;
    struct One(Param<f32>);
    impl HasParams<f32> for One {
        fn visit(&self, f: &mut dyn FnMut(&Param<f32>)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
            f(&mut self.0)
        }
    }
    let mut p = One(Param::filled("w", &[1], ParamKind::Trainable, 1.0));
    let cfg = TrainingConfig {
        momentum: 0.5,
        weight_decay: 0.1,
        ..TrainingConfig::default()
    };
    let mut opt = Optimizer::new(&cfg);
    p.0.grad[0] = 2.0;
    opt.step(&mut p, 0.1);
    // v = 2 + 0.1*1 = 2.1; w = 1 - 0.21
    assert!((p.0.value[0] - 0.79).abs() < 1e-6);
    opt.step(&mut p, 0.1);
    // v = 0.5*2.1 + 2 + 0.079 = 3.129; w = 0.79 - 0.3129
    assert!((p.0.value[0] - 0.4771).abs() < 1e-6);
}

#[test]
fn short_run_produces_snapshots_and_a_log() {
    let split = small_split();
    let spec = SegmentationModelSpec::tiny(64);
    let dir = tempfile::tempdir().unwrap();
    let ctx = RunContext {
        round: Some(1),
        phase: "supervised".into(),
        out_dir: Some(dir.path().to_path_buf()),
    };
    let out = train_run(&spec, &split, &desk_geometry(), &small_config(), 5, &ctx).unwrap();
    assert_eq!(out.snapshots.len(), 2);
    assert_eq!(out.snapshots.iter().map(|s| s.epoch).collect::<Vec<_>>(), vec![1, 3]);
    assert_eq!(out.snapshots[1].params.tags.snapshot, Some(1));
    assert_eq!(out.snapshots[1].params.tags.fold, Some(0));
    assert_eq!(out.log.rows.len(), 4);
    assert_eq!(out.log.rows[1].phase, LossKind::Bce);
    assert_eq!(out.log.rows[2].phase, LossKind::Lovasz);

    let mut best = f64::INFINITY;
    let mut best_so_far = Vec::new();
    for r in &out.log.rows {
        let v = r.val_loss.unwrap();
        assert!(v.is_finite() && r.train_loss.is_finite());
        assert!((0.0..=1.0).contains(&r.val_map.unwrap()));
        best = best.min(v);
        best_so_far.push(best);
    }
    assert!(best_so_far.windows(2).all(|w| w[1] <= w[0]));

    let csv = fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert!(csv.starts_with("epoch,phase,lr,train_loss,val_loss,val_map\n"));
    assert_eq!(csv.lines().count(), 5);
    let manifest: RunManifest = read_json(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.init, InitSource::Random { seed: 5 });
    assert_eq!(manifest.snapshots, vec!["snapshot_0.ckpt", "snapshot_1.ckpt"]);
    let loaded = ModelParameters::load(&dir.path().join("snapshot_1.ckpt")).unwrap();
    assert_eq!(loaded, out.snapshots[1].params);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let split = small_split();
    let spec = SegmentationModelSpec::tiny(64);
    let cfg = TrainingConfig {
        epochs: 2,
        cycle_len: 2,
        warmup_epochs: 1,
        ..small_config()
    };
    let ctx = RunContext::in_memory("supervised");
    let a = train_run(&spec, &split, &desk_geometry(), &cfg, 1, &ctx).unwrap();
    let b = train_run(&spec, &split, &desk_geometry(), &cfg, 1, &ctx).unwrap();
    let bits = |log: &TrainingLog| {
        log.rows
            .iter()
            .map(|r| (r.train_loss.to_bits(), r.val_loss.map(f64::to_bits), r.val_map.map(f64::to_bits)))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.log), bits(&b.log));
    assert_eq!(a.final_params, b.final_params);
}

#[test]
fn finetune_with_zero_epochs_returns_params_unchanged() {
    let spec = SegmentationModelSpec::tiny(64);
    let params = SegmentationModel::<f32>::new(&spec, 3)
        .unwrap()
        .parameters(ParamTags::default());
    let cfg = TrainingConfig {
        epochs: 0,
        cycle_len: 2,
        warmup_epochs: 0,
        ..small_config()
    };
    let ctx = RunContext::in_memory("finetune");
    let out = finetune_run(&spec, &small_split(), &desk_geometry(), &cfg, &params, "pseudo", &ctx).unwrap();
    assert!(out.snapshots.is_empty());
    assert_eq!(
        out.final_params.arrays.iter().map(|a| &a.data).collect::<Vec<_>>(),
        params.arrays.iter().map(|a| &a.data).collect::<Vec<_>>()
    );
    assert!(!out.manifest.init.is_fresh());

    let other = SegmentationModelSpec::tiny(128);
    let err = finetune_run(&other, &small_split(), &desk_geometry(), &cfg, &params, "pseudo", &ctx).unwrap_err();
    assert!(matches!(err, Error::Compatibility(_)));
}

#[test]
fn leakage_and_empty_folds_are_rejected() {
    let split = small_split();
    let spec = SegmentationModelSpec::tiny(64);
    let ctx = RunContext::in_memory("supervised");
    let leaky = split.with_train(split.train.union(&split.val.clone().unwrap().filter(|_| true)).unwrap());
    let err = train_run(&spec, &leaky, &desk_geometry(), &small_config(), 0, &ctx).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
    let empty = split.with_train(split.train.filter(|_| false));
    let err = train_run(&spec, &empty, &desk_geometry(), &small_config(), 0, &ctx).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn diverging_run_aborts_with_numerical_error() {
    let split = small_split();
    let cfg = TrainingConfig {
        lr_max: 1e30,
        lr_min: 1e30,
        optimizer: OptimizerKind::Sgd,
        epochs: 2,
        cycle_len: 2,
        warmup_epochs: 2,
        ..small_config()
    };
    let err = train_run(
        &SegmentationModelSpec::tiny(64),
        &split,
        &desk_geometry(),
        &cfg,
        0,
        &RunContext::in_memory("supervised"),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}
