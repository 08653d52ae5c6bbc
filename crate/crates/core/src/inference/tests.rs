use proptest::prelude::*;

use super::*;
use crate::data::{generate_synthetic, DatasetKind};
use crate::model::{ParamTags, SegmentationModelSpec};
use crate::nn::ParamKind;

fn geometry() -> Geometry {
    Geometry::new(64, 64, 64).unwrap()
}

fn member(seed: u64, tags: ParamTags) -> EnsembleMember {
    let model = SegmentationModel::<f32>::new(&SegmentationModelSpec::tiny(64), seed).unwrap();
    EnsembleMember::from_params(model.parameters(tags), format!("seed {seed}"))
}

/// A member whose output is `p` at every pixel: all trainable weights zero
/// except the final bias.
fn constant_member(p: f32) -> EnsembleMember {
    let mut params = member(0, ParamTags::default()).params;
    for a in &mut params.arrays {
        if a.kind == ParamKind::Trainable {
            a.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let bias = params
        .arrays
        .iter_mut()
        .find(|a| a.name == "head.out.bias")
        .expect("head output bias");
    bias.data[0] = (p / (1.0 - p)).ln();
    EnsembleMember::from_params(params, format!("constant {p}"))
}

fn samples(n: usize) -> Dataset {
    generate_synthetic(n, 64, 11).unwrap()
}

fn ensemble(members: Vec<EnsembleMember>, tta: bool) -> Ensemble {
    Ensemble::new(&EnsembleSpec::new(members, tta).unwrap()).unwrap()
}

fn max_diff(a: &[Image], b: &[Image]) -> f32 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f32::max)
}

#[test]
fn binarize_uses_a_strict_cut() {
    assert!(binarize(&Image::filled(5, 5, 0.5), BINARIZE_THRESHOLD).is_empty());
    assert_eq!(binarize(&Image::filled(5, 5, 0.9), BINARIZE_THRESHOLD).count(), 25);
    let m = binarize(&Image::new(1, 3, vec![0.2, 0.51, 0.5]).unwrap(), BINARIZE_THRESHOLD);
    assert_eq!(m.data(), &[0, 1, 0]);
}

proptest! {
    #[test]
    fn binarize_is_idempotent(values in proptest::collection::vec(0.0f32..=1.0, 16)) {
        let once = binarize(&Image::new(4, 4, values).unwrap(), BINARIZE_THRESHOLD);
        prop_assert_eq!(binarize(&once.to_image(), BINARIZE_THRESHOLD), once);
    }
}

#[test]
fn tta_is_flip_equivariant() {
    let mut model = SegmentationModel::<f32>::new(&SegmentationModelSpec::tiny(64), 3).unwrap();
    let data = samples(2);
    let refs: Vec<&SeismicSample> = data.samples().iter().collect();
    let (x, _) = batch_tensors(&refs, &geometry()).unwrap();
    let a = tta_predict(&mut model, &x).unwrap().flip_horizontal();
    let b = tta_predict(&mut model, &x.flip_horizontal()).unwrap();
    let diff = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f32::max);
    assert!(diff < 1e-6, "{diff}");
    assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn singleton_and_duplicate_ensembles_equal_the_member() {
    let data = samples(3);
    let refs: Vec<&SeismicSample> = data.samples().iter().collect();
    let m = member(5, ParamTags::default());
    let mut model = SegmentationModel::<f32>::from_parameters(&m.params).unwrap();
    let (x, _) = batch_tensors(&refs, &geometry()).unwrap();
    let direct = tta_predict(&mut model, &x).unwrap();
    let direct: Vec<Image> = (0..3).map(|i| geometry().postprocess_plane(direct.item(i)).unwrap()).collect();
    let single = ensemble(vec![m.clone()], true).predict(&refs, &geometry()).unwrap();
    let doubled = ensemble(vec![m.clone(), m], true).predict(&refs, &geometry()).unwrap();
    assert!(max_diff(&single, &direct) < 1e-6);
    assert!(max_diff(&doubled, &single) < 1e-6);
}

#[test]
fn member_order_does_not_matter() {
    let data = samples(3);
    let members: Vec<EnsembleMember> = (0..4).map(|s| member(s, ParamTags::default())).collect();
    let mut reversed = members.clone();
    reversed.reverse();
    let a = ensemble(members, false).predict_dataset(&data, &geometry(), 1).unwrap();
    let b = ensemble(reversed, false).predict_dataset(&data, &geometry(), 2).unwrap();
    assert!(max_diff(&a, &b) < 1e-6);
    assert!(a.iter().all(|img| img.data().iter().all(|&p| p > 0.0 && p < 1.0)));
}

#[test]
fn probabilities_are_averaged_before_the_cut() {
    let data = samples(1);
    let out = ensemble(vec![constant_member(0.4), constant_member(0.8)], true)
        .predict_dataset(&data, &geometry(), 1)
        .unwrap();
    assert!(out[0].data().iter().all(|&p| (p - 0.6).abs() < 1e-5));
    assert_eq!(binarize(&out[0], BINARIZE_THRESHOLD).count(), 64 * 64);
    // Averaging logits instead gives sigmoid(mean logit) < 0.6.
    let logit = Ensemble::new(
        &EnsembleSpec::new(vec![constant_member(0.4), constant_member(0.8)], false)
            .unwrap()
            .with_average(AverageSpace::Logit),
    )
    .unwrap()
    .predict_dataset(&data, &geometry(), 1)
    .unwrap();
    let expected = sigmoid(0.5 * ((0.4f32 / 0.6).ln() + 4f32.ln()));
    assert!((logit[0].data()[0] - expected).abs() < 1e-5);
}

#[test]
fn incompatible_members_are_named() {
    let other = SegmentationModel::<f32>::new(&SegmentationModelSpec::tiny(128), 0).unwrap();
    let odd = EnsembleMember::from_params(other.parameters(ParamTags::default()), "odd.ckpt");
    let err = EnsembleSpec::new(vec![member(0, ParamTags::default()), odd], false).unwrap_err();
    assert!(matches!(&err, Error::Compatibility(m) if m.contains("odd.ckpt")), "{err}");
    assert!(matches!(EnsembleSpec::new(vec![], false), Err(Error::Config(_))));
    let e = ensemble(vec![member(0, ParamTags::default())], false);
    let wrong = Geometry::new(101, 202, 256).unwrap();
    let big = generate_synthetic(1, 101, 0).unwrap();
    assert!(matches!(e.predict_dataset(&big, &wrong, 1), Err(Error::Compatibility(_))));
}

#[test]
fn evaluate_scores_all_empty_predictions_by_empty_fraction() {
    let data = samples(20);
    let empty = data.samples().iter().filter(|s| s.mask.as_ref().unwrap().is_empty()).count();
    let report = evaluate(&ensemble(vec![constant_member(0.1)], false), &data, &geometry(), 2).unwrap();
    assert!((report.map_score - empty as f64 / 20.0).abs() < 1e-12);
    let unlabeled = Dataset::new(data.samples().iter().map(SeismicSample::unlabeled).collect(), DatasetKind::Pseudo).unwrap();
    assert!(matches!(
        evaluate(&ensemble(vec![constant_member(0.1)], false), &unlabeled, &geometry(), 1),
        Err(Error::Validation(_))
    ));
}

#[test]
fn cached_predictions_are_reused() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(2);
    let m = member(9, ParamTags::default());
    let plain = ensemble(vec![m.clone()], true).predict_dataset(&data, &geometry(), 1).unwrap();
    let cached = ensemble(vec![m.clone()], true).with_cache(PredictionCache::new(dir.path()));
    assert_eq!(cached.predict_dataset(&data, &geometry(), 1).unwrap(), plain);
    let digest = params_digest(&m.params).unwrap();
    let file = dir.path().join(&digest).join(format!("{}.tta-prob.f32", data.samples()[0].id));
    assert!(file.is_file());
    // Overwrite the cached plane: a second prediction must pick it up.
    fs::write(&file, vec![0u8; 4 * 64 * 64]).unwrap();
    let again = cached.predict_dataset(&data, &geometry(), 1).unwrap();
    assert!(again[0].data().iter().all(|&p| p == 0.0));
    assert_eq!(again[1], plain[1]);
}

#[test]
fn submission_lines_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub.csv");
    let mut preds = BTreeMap::new();
    preds.insert("b".to_string(), Mask::ones(101, 101));
    preds.insert("a".to_string(), Mask::zeros(101, 101));
    preds.insert("c".to_string(), Mask::from_fn(101, 101, |r, c| (r * 7 + c * 3) % 5 == 0));
    write_submission(&preds, 101, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,rle_mask");
    assert_eq!(lines[1], "a,");
    assert_eq!(lines[2], "b,1 10201");
    assert_eq!(read_submission(&path, 101).unwrap(), preds);
    preds.insert("d".to_string(), Mask::zeros(64, 64));
    assert!(matches!(write_submission(&preds, 101, &path), Err(Error::Validation(_))));
}

fn tag(arch: &str, round: usize, fold: usize, snapshot: usize) -> MemberTag {
    MemberTag {
        arch: arch.into(),
        round: Some(round),
        fold: Some(fold),
        snapshot: Some(snapshot),
    }
}

#[test]
fn selector_grammar() {
    let s = Selector::parse("rounds in {2,3}, folds=*, snapshots=*, arch=*").unwrap();
    assert!(s.matches(&tag("tiny-test", 2, 4, 3)));
    assert!(!s.matches(&tag("tiny-test", 1, 0, 0)));
    let s: Selector = "round=2, arch=residual-34-style, snapshot in { 0 , 3 }".parse().unwrap();
    assert!(s.matches(&tag("residual-34-style", 2, 1, 3)));
    assert!(!s.matches(&tag("residual-34-style", 2, 1, 1)));
    assert!(!s.matches(&tag("tiny-test", 2, 1, 0)));
    let unfolded = MemberTag { fold: None, ..tag("x", 2, 0, 0) };
    assert!(Selector::parse("fold=*").unwrap().matches(&unfolded));
    assert!(!Selector::parse("fold=0").unwrap().matches(&unfolded));
}

#[test]
fn selector_errors_carry_positions() {
    let pos = |text: &str| match Selector::parse(text) {
        Err(Error::Parse { position, .. }) => position,
        other => panic!("{text}: {other:?}"),
    };
    assert_eq!(pos(""), 0);
    assert_eq!(pos("rounds=2, colour=red"), 10);
    assert_eq!(pos("round=two"), 6);
    assert_eq!(pos("round in {2,3"), 13);
    assert_eq!(pos("round in 2"), 9);
    assert_eq!(pos("round 2"), 6);
    assert_eq!(pos("round=2 fold=1"), 8);
    assert_eq!(pos("round=2, round=3"), 9);
}

#[test]
fn inventory_selection_over_a_stub_layout() {
    let dir = tempfile::tempdir().unwrap();
    let specs = [SegmentationModelSpec::residual34(), SegmentationModelSpec::residual_grouped50()];
    for round in 1..=3 {
        for (a, spec) in specs.iter().enumerate() {
            for fold in 0..5 {
                for snapshot in 0..4 {
                    // Header-only stand-ins: the inventory never reads arrays.
                    let stub = ModelParameters {
                        spec: spec.clone(),
                        spec_hash: spec.spec_hash(),
                        tags: ParamTags {
                            round: Some(round),
                            fold: Some(fold),
                            snapshot: Some(snapshot),
                            epoch: None,
                        },
                        arrays: vec![],
                    };
                    let path = dir
                        .path()
                        .join(format!("rounds/{round}/checkpoints/{a}/fold_{fold}/snapshot_{snapshot}.ckpt"));
                    stub.save(&path).unwrap();
                }
            }
        }
    }
    let inventory = checkpoint_inventory(dir.path()).unwrap();
    assert_eq!(inventory.len(), 120);
    let count = |s: &str| select(&inventory, &Selector::parse(s).unwrap()).map(|v| v.len());
    assert_eq!(count("round=2").unwrap(), 40);
    assert_eq!(count("rounds in {2,3}, folds=*, snapshots=*, arch=*").unwrap(), 80);
    assert_eq!(count("round=3, arch=residual-grouped-50-style, fold=4").unwrap(), 4);
    assert!(matches!(count("round=7"), Err(Error::Config(_))));
}
