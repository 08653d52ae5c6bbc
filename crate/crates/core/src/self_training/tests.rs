use super::*;
use crate::data::{generate_synthetic, make_folds};
use crate::model::{ParamTags, SegmentationModel};
use crate::nn::ParamKind;
use crate::trainer::OptimizerKind;

fn geometry() -> Geometry {
    Geometry::new(64, 64, 64).unwrap()
}

/// A member whose logit is `logit` at every pixel.
fn constant_member(logit: f32) -> EnsembleMember {
    let model = SegmentationModel::<f32>::new(&SegmentationModelSpec::tiny(64), 0).unwrap();
    let mut params = model.parameters(ParamTags::default());
    for a in &mut params.arrays {
        if a.kind == ParamKind::Trainable {
            a.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    params.arrays.iter_mut().find(|a| a.name == "head.out.bias").unwrap().data[0] = logit;
    EnsembleMember::from_params(params, format!("constant {logit}"))
}

fn ensemble(members: Vec<EnsembleMember>) -> Ensemble {
    Ensemble::new(&EnsembleSpec::new(members, true).unwrap()).unwrap()
}

fn unlabeled(n: usize, seed: u64) -> Dataset {
    if n == 0 {
        return Dataset::new(vec![], DatasetKind::Mixed).unwrap();
    }
    let d = generate_synthetic(n, 64, seed).unwrap();
    let samples = d
        .samples()
        .iter()
        .map(|s| {
            let mut u = s.unlabeled();
            u.id = format!("pool{}", s.id);
            u
        })
        .collect();
    Dataset::new(samples, DatasetKind::Mixed).unwrap()
}

#[test]
fn pseudo_labels_follow_the_mean_probability() {
    let pool = unlabeled(5, 1);
    // 0.4 and 0.8 average to 0.6: every pixel becomes salt.
    let logit = |p: f32| (p / (1.0 - p)).ln();
    let e = ensemble(vec![constant_member(logit(0.4)), constant_member(logit(0.8))]);
    let set = generate_pseudo_labels(&e, &pool, &geometry(), f64::NEG_INFINITY, 1, false, 2).unwrap();
    assert_eq!(set.len(), 5);
    let expected = -(-(0.6f64 * 0.6f64.ln()) - 0.4 * 0.4f64.ln());
    for (id, label) in &set.entries {
        assert!(pool.get(id).is_some());
        assert_eq!(label.mask.count(), 64 * 64);
        assert!((label.confidence - expected).abs() < 1e-5, "{}", label.confidence);
    }
    // A soft mask never reaches the top confidence of 0.
    assert!(generate_pseudo_labels(&e, &pool, &geometry(), 0.0, 1, false, 1).unwrap().is_empty());
    // The flag turns all-salt masks into empty ones.
    let flagged = generate_pseudo_labels(&e, &pool, &geometry(), f64::NEG_INFINITY, 1, true, 1).unwrap();
    assert!(flagged.entries.values().all(|l| l.mask.is_empty()));
}

#[test]
fn saturated_masks_survive_a_zero_threshold() {
    let pool = unlabeled(3, 2);
    let e = ensemble(vec![constant_member(-200.0)]);
    let set = generate_pseudo_labels(&e, &pool, &geometry(), 0.0, 2, false, 1).unwrap();
    assert_eq!(set.len(), 3);
    assert!(set.entries.values().all(|l| l.confidence == 0.0 && l.mask.is_empty()));
}

#[test]
fn empty_pool_gives_an_empty_set() {
    let pool = Dataset::new(vec![], DatasetKind::Mixed).unwrap();
    let e = ensemble(vec![constant_member(0.0)]);
    assert!(generate_pseudo_labels(&e, &pool, &geometry(), f64::NEG_INFINITY, 1, false, 1)
        .unwrap()
        .is_empty());
}

#[test]
fn pseudo_label_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pseudo_labels.csv");
    let mut entries = BTreeMap::new();
    entries.insert(
        "x1".to_string(),
        PseudoLabel {
            mask: Mask::from_fn(64, 64, |r, c| r > c),
            confidence: -0.123456789012345,
        },
    );
    entries.insert(
        "x0".to_string(),
        PseudoLabel {
            mask: Mask::zeros(64, 64),
            confidence: 0.0,
        },
    );
    let set = PseudoLabelSet { round: 3, entries };
    set.write_csv(&path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("id,rle_mask,confidence\nx0,,0\n"));
    assert_eq!(PseudoLabelSet::read_csv(&path, 64, 3).unwrap(), set);
    let pool = unlabeled(2, 0);
    assert!(matches!(set.dataset(&pool), Err(Error::Lookup(_))));
}

struct Fixture {
    labeled: Dataset,
    pool: Dataset,
    holdout: Dataset,
    folds: FoldAssignment,
    specs: Vec<SegmentationModelSpec>,
    training: TrainingConfig,
    config: SelfTrainingConfig,
}

impl Fixture {
    fn new(pool_size: usize) -> Self {
        let labeled = generate_synthetic(16, 64, 5).unwrap();
        let holdout = Dataset::new(
            generate_synthetic(4, 64, 6)
                .unwrap()
                .samples()
                .iter()
                .map(|s| SeismicSample {
                    id: format!("hold{}", s.id),
                    ..s.clone()
                })
                .collect(),
            DatasetKind::GroundTruth,
        )
        .unwrap();
        let folds = make_folds(&labeled.ids(), 2, 0).unwrap();
        Self {
            labeled,
            pool: unlabeled(pool_size, 7),
            holdout,
            folds,
            specs: vec![SegmentationModelSpec::tiny(64)],
            training: TrainingConfig {
                epochs: 2,
                cycle_len: 1,
                warmup_epochs: 1,
                batch_size: 4,
                lr_max: 0.002,
                lr_min: 0.0002,
                optimizer: OptimizerKind::Adam,
                rounds: 2,
                seed: 3,
                ..TrainingConfig::default()
            },
            config: SelfTrainingConfig::default(),
        }
    }

    fn job(&self) -> SelfTrainingJob<'_> {
        SelfTrainingJob {
            labeled: &self.labeled,
            pool: &self.pool,
            holdout: Some(&self.holdout),
            specs: &self.specs,
            folds: &self.folds,
            geometry: geometry(),
            training: &self.training,
            config: &self.config,
            experiment_hash: None,
            workers: 2,
        }
    }
}

fn digests(out: &SelfTrainingOutput) -> Vec<Vec<String>> {
    out.rounds
        .iter()
        .map(|r| r.manifest.members.iter().map(|m| m.digest.clone()).collect())
        .collect()
}

#[test]
fn rounds_start_fresh_and_relabel_the_whole_pool() {
    let dir = tempfile::tempdir().unwrap();
    let fx = Fixture::new(6);
    let out = run_self_training(&fx.job(), Some(dir.path())).unwrap();
    assert_eq!(out.rounds.len(), 2);
    let pool_ids: Vec<String> = fx.pool.ids();
    for (k, r) in out.rounds.iter().enumerate() {
        let k = k + 1;
        check_lineage(&r.manifest).unwrap();
        assert_eq!(r.manifest.lineage.len(), 2);
        assert_eq!(r.members.len(), 4, "2 folds x 2 snapshots");
        assert!(r.members.iter().all(|m| m.tag.round == Some(k)));
        assert_eq!(r.pseudo_labels.round, k);
        assert_eq!(r.pseudo_labels.entries.keys().cloned().collect::<Vec<_>>(), pool_ids);
        assert!(r.manifest.holdout_map.is_some());
        let rd = round_dir(dir.path(), k);
        assert!(rd.join("manifest.json").is_file());
        assert_eq!(PseudoLabelSet::read_csv(&rd.join("pseudo_labels.csv"), 64, k).unwrap(), r.pseudo_labels);
        for m in &r.manifest.members {
            assert!(rd.join(m.path.as_ref().unwrap()).is_file());
        }
    }
    let r2 = &out.rounds[1].manifest;
    assert_eq!(r2.pseudo_labels_used, 6);
    for job in &r2.lineage {
        let phases: Vec<&str> = job.phases.iter().map(|p| p.phase.as_str()).collect();
        assert_eq!(phases, ["pseudo", "finetune"]);
        assert_eq!(job.phases[0].train_size, 6);
    }
    // No round-2 job starts from a round-1 parameter set.
    let round1: Vec<&str> = out.rounds[0].manifest.lineage.iter().flat_map(|j| &j.phases).map(|p| p.final_digest.as_str()).collect();
    for p in out.rounds[1].manifest.lineage.iter().flat_map(|j| &j.phases) {
        if let InitSource::Continuation { params_digest, .. } = &p.init {
            assert!(!round1.contains(&params_digest.as_str()));
        }
    }

    // A complete directory is reused as is.
    let again = run_self_training(&fx.job(), Some(dir.path())).unwrap();
    assert_eq!(digests(&again), digests(&out));

    // Losing round 2 retrains only round 2, reproducibly.
    let r1_ckpt = round_dir(dir.path(), 1).join(out.rounds[0].manifest.members[0].path.as_ref().unwrap());
    let stamp = fs::metadata(&r1_ckpt).unwrap().modified().unwrap();
    fs::remove_dir_all(round_dir(dir.path(), 2)).unwrap();
    let resumed = run_self_training(&fx.job(), Some(dir.path())).unwrap();
    assert_eq!(fs::metadata(&r1_ckpt).unwrap().modified().unwrap(), stamp);
    assert_eq!(digests(&resumed), digests(&out));
    assert_eq!(resumed.rounds[1].pseudo_labels, out.rounds[1].pseudo_labels);

    // A missing checkpoint in a completed round is reported, not skipped.
    fs::remove_file(&r1_ckpt).unwrap();
    assert!(matches!(run_self_training(&fx.job(), Some(dir.path())), Err(Error::Orchestration(_))));
}

#[test]
fn a_changed_configuration_does_not_reuse_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let mut fx = Fixture::new(2);
    fx.training.rounds = 1;
    run_self_training(&fx.job(), Some(dir.path())).unwrap();
    fx.training.seed += 1;
    let err = run_self_training(&fx.job(), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Orchestration(_)), "{err}");
}

#[test]
fn single_round_is_plain_supervised_training() {
    let mut fx = Fixture::new(3);
    fx.training.rounds = 1;
    let out = run_self_training(&fx.job(), None).unwrap();
    assert_eq!(out.rounds.len(), 1);
    let m = &out.rounds[0].manifest;
    assert_eq!(m.pseudo_labels_used, 0);
    assert!(m.lineage.iter().all(|j| j.phases.len() == 1 && j.phases[0].train_size == 8));
    assert_eq!(out.rounds[0].pseudo_labels.len(), 3);
}

#[test]
fn joint_mode_trains_on_the_union() {
    let mut fx = Fixture::new(4);
    fx.config.mode = PseudoMode::Joint;
    let out = run_self_training(&fx.job(), None).unwrap();
    let r2 = &out.rounds[1].manifest;
    assert!(r2.lineage.iter().all(|j| j.phases.len() == 1 && j.phases[0].phase == "joint" && j.phases[0].train_size == 12));
    check_lineage(r2).unwrap();
}

#[test]
fn empty_pool_degrades_gracefully() {
    for mode in [PseudoMode::Sequential, PseudoMode::Joint] {
        let mut fx = Fixture::new(0);
        fx.config.mode = mode;
        let out = run_self_training(&fx.job(), None).unwrap();
        assert_eq!(out.rounds.len(), 2);
        let r2 = &out.rounds[1].manifest;
        assert_eq!(r2.pseudo_labels_used, 0);
        assert!(r2.lineage.iter().all(|j| j.phases.len() == 1 && j.phases[0].init.is_fresh()));
        assert!(out.rounds.iter().all(|r| r.pseudo_labels.is_empty()));
    }
}

#[test]
fn pool_overlapping_labels_is_rejected() {
    let mut fx = Fixture::new(0);
    fx.pool = Dataset::new(
        fx.labeled.samples()[..2].iter().map(SeismicSample::unlabeled).collect(),
        DatasetKind::Mixed,
    )
    .unwrap();
    assert!(matches!(run_self_training(&fx.job(), None), Err(Error::Validation(_))));
}
