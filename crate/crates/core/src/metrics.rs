//! Competition metric (mean over images of the average precision across
//! ten IoU thresholds) and entropy-based pseudo-label confidence.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::data::Mask;
use crate::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdVector {
    values: [f64; 10],
}

impl Default for ThresholdVector {
    fn default() -> Self {
        let mut values = [0.0; 10];
        for (i, v) in values.iter_mut().enumerate() {
            *v = (50 + 5 * i) as f64 / 100.0;
        }
        Self { values }
    }
}

impl ThresholdVector {
    pub fn values(&self) -> &[f64; 10] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub per_image_ap: BTreeMap<String, f64>,
    pub map_score: f64,
}

impl EvaluationReport {
    /// Rows `id,ap` followed by a `mAP,<score>` summary line.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "id,ap")?;
        for (id, ap) in &self.per_image_ap {
            writeln!(out, "{id},{ap}")?;
        }
        writeln!(out, "mAP,{}", self.map_score)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}

fn check_shapes(a: &Mask, b: &Mask) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn overlap_counts(a: &Mask, b: &Mask) -> (usize, usize) {
    a.data().iter().zip(b.data()).fold((0, 0), |(i, u), (&x, &y)| {
        (i + (x & y) as usize, u + (x | y) as usize)
    })
}

/// `|A ∩ B| / |A ∪ B|`; undefined when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    check_shapes(a, b)?;
    let (inter, union) = overlap_counts(a, b);
    if union == 0 {
        return Err(Error::Domain("IoU of two empty masks is undefined".into()));
    }
    Ok(inter as f64 / union as f64)
}

fn precision_from_counts(truth_empty: bool, pred_empty: bool, inter: usize, union: usize, t: f64) -> u8 {
    match (truth_empty, pred_empty) {
        (true, true) => 1,
        (true, false) | (false, true) => 0,
        (false, false) => (inter as f64 / union as f64 > t) as u8,
    }
}

/// Hit (1) or miss (0) of a prediction at IoU threshold `t` (strict `>`).
pub fn precision_at(y: &Mask, y_pred: &Mask, t: f64) -> Result<u8> {
    check_shapes(y, y_pred)?;
    let (inter, union) = overlap_counts(y, y_pred);
    Ok(precision_from_counts(y.is_empty(), y_pred.is_empty(), inter, union, t))
}

/// Mean of [`precision_at`] over the thresholds.
pub fn average_precision(y: &Mask, y_pred: &Mask, thresholds: &ThresholdVector) -> Result<f64> {
    check_shapes(y, y_pred)?;
    let (inter, union) = overlap_counts(y, y_pred);
    let (te, pe) = (y.is_empty(), y_pred.is_empty());
    let hits: u32 = thresholds
        .values()
        .iter()
        .map(|&t| precision_from_counts(te, pe, inter, union, t) as u32)
        .sum();
    Ok(hits as f64 / thresholds.values().len() as f64)
}

/// Per-image AP and their mean over `(id, truth, prediction)` triples.
pub fn mean_ap<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a Mask, &'a Mask)>) -> Result<EvaluationReport> {
    let thresholds = ThresholdVector::default();
    let mut per_image_ap = BTreeMap::new();
    for (id, y, y_pred) in pairs {
        let ap = average_precision(y, y_pred, &thresholds)?;
        if per_image_ap.insert(id.to_string(), ap).is_some() {
            return Err(Error::Validation(format!("duplicate id `{id}` in evaluation")));
        }
    }
    if per_image_ap.is_empty() {
        return Err(Error::Domain("mean AP of an empty set is undefined".into()));
    }
    // Sum in id order so the result does not depend on input order.
    let map_score = per_image_ap.values().sum::<f64>() / per_image_ap.len() as f64;
    Ok(EvaluationReport { per_image_ap, map_score })
}

/// Negative mean binary entropy (natural log) of a soft mask; 0 for a
/// perfectly confident mask, `-ln 2` for a uniformly undecided one.
pub fn mask_confidence(probabilities: &[f32]) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(Error::Domain("confidence of an empty mask".into()));
    }
    let mut total = 0.0f64;
    for &p in probabilities {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
        }
        total += binary_entropy(p as f64);
    }
    Ok(-total / probabilities.len() as f64)
}

fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    term(p) + term(1.0 - p)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn mask_from(h: usize, w: usize, pixels: &[(usize, usize)]) -> Mask {
        let set: HashSet<_> = pixels.iter().copied().collect();
        Mask::from_fn(h, w, |r, c| set.contains(&(r, c)))
    }

    /// Masks over a `1 x n` strip whose IoU is exactly `inter / union`.
    fn strip_pair(inter: usize, union: usize) -> (Mask, Mask) {
        let truth = Mask::from_fn(1, union, |_, c| c < inter);
        let pred = Mask::from_fn(1, union, |_, _| true);
        (truth, pred)
    }

    #[test]
    fn iou_basics() {
        let a = mask_from(4, 4, &[(0, 0), (0, 1)]);
        let b = mask_from(4, 4, &[(0, 1), (0, 2)]);
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let c = mask_from(4, 4, &[(3, 3)]);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        assert!(matches!(iou(&Mask::zeros(4, 4), &Mask::zeros(4, 4)), Err(Error::Domain(_))));
        assert!(matches!(iou(&a, &Mask::zeros(3, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn empty_mask_rules() {
        let e = Mask::zeros(5, 5);
        let f = mask_from(5, 5, &[(2, 2)]);
        assert_eq!(precision_at(&e, &e, 0.5).unwrap(), 1);
        assert_eq!(precision_at(&e, &f, 0.5).unwrap(), 0);
        assert_eq!(precision_at(&f, &e, 0.5).unwrap(), 0);
        let th = ThresholdVector::default();
        assert_eq!(average_precision(&e, &e, &th).unwrap(), 1.0);
        assert_eq!(average_precision(&e, &f, &th).unwrap(), 0.0);
        assert_eq!(average_precision(&f, &e, &th).unwrap(), 0.0);
    }

    #[test]
    fn strict_threshold_inequality() {
        let (y, p) = strip_pair(72, 100);
        assert_eq!(iou(&y, &p).unwrap(), 0.72);
        assert_eq!(precision_at(&y, &p, 0.70).unwrap(), 1);
        assert_eq!(precision_at(&y, &p, 0.75).unwrap(), 0);
        assert_eq!(average_precision(&y, &p, &ThresholdVector::default()).unwrap(), 0.5);
        // Exact tie at 0.70 does not count.
        let (y, p) = strip_pair(7, 10);
        assert_eq!(precision_at(&y, &p, 0.70).unwrap(), 0);
        assert_eq!(average_precision(&y, &p, &ThresholdVector::default()).unwrap(), 0.4);
    }

    #[test]
    fn thresholds_are_the_ten_competition_values() {
        let th = ThresholdVector::default();
        assert_eq!(th.values()[0], 0.5);
        assert_eq!(th.values()[9], 0.95);
        for w in th.values().windows(2) {
            assert!((w[1] - w[0] - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_ap_examples() {
        let f = mask_from(3, 3, &[(1, 1)]);
        let r = mean_ap([("a", &f, &f)]).unwrap();
        assert_eq!(r.map_score, 1.0);
        let e = Mask::zeros(3, 3);
        let r = mean_ap([("a", &f, &f), ("b", &e, &f)]).unwrap();
        assert_eq!(r.map_score, 0.5);
        assert_eq!(r.per_image_ap["b"], 0.0);
        assert!(matches!(mean_ap(std::iter::empty()), Err(Error::Domain(_))));
    }

    #[test]
    fn report_csv_format() {
        let f = mask_from(2, 2, &[(0, 0)]);
        let r = mean_ap([("x", &f, &f)]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "id,ap\nx,1\nmAP,1\n");
    }

    /// Set-based oracle: IoU via hash sets of pixel indices, AP as an
    /// integer count of passed thresholds compared in exact hundredths.
    fn oracle_hits(y: &Mask, p: &Mask) -> u32 {
        let ys: HashSet<usize> = (0..y.data().len()).filter(|&i| y.data()[i] == 1).collect();
        let ps: HashSet<usize> = (0..p.data().len()).filter(|&i| p.data()[i] == 1).collect();
        match (ys.is_empty(), ps.is_empty()) {
            (true, true) => 10,
            (true, false) | (false, true) => 0,
            _ => {
                let inter = ys.intersection(&ps).count() as u64;
                let union = ys.union(&ps).count() as u64;
                (0..10u64).filter(|i| 100 * inter > (50 + 5 * i) * union).count() as u32
            }
        }
    }

    #[test]
    fn mean_ap_matches_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut pairs = Vec::new();
        for i in 0..100 {
            let (h, w) = (rng.gen_range(2..8), rng.gen_range(2..8));
            let density = rng.gen_range(0.0..1.0);
            let yd: Vec<u8> = (0..h * w).map(|_| rng.gen_bool(density) as u8).collect();
            let pd: Vec<u8> = yd
                .iter()
                .map(|&v| if rng.gen_bool(0.8) { v } else { rng.gen_range(0..2) })
                .collect();
            let y = Mask::from_vec(h, w, yd).unwrap();
            let p = Mask::from_vec(h, w, pd).unwrap();
            pairs.push((format!("{i}"), y, p));
        }
        let report = mean_ap(pairs.iter().map(|(id, y, p)| (id.as_str(), y, p))).unwrap();
        let total: u32 = pairs.iter().map(|(_, y, p)| oracle_hits(y, p)).sum();
        let expect = total as f64 / (10.0 * pairs.len() as f64);
        assert!((report.map_score - expect).abs() < 1e-12);
        for (id, y, p) in &pairs {
            assert_eq!(report.per_image_ap[id], oracle_hits(y, p) as f64 / 10.0);
        }
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(mask_confidence(&[0.0, 1.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((mask_confidence(&[0.5; 9]).unwrap() + std::f64::consts::LN_2).abs() < 1e-12);
        let expect = -(-0.9f64 * 0.9f64.ln() - 0.1 * 0.1f64.ln());
        let got = mask_confidence(&[0.9; 4]).unwrap();
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
        assert!((got + 0.3251).abs() < 1e-4);
        assert!(matches!(mask_confidence(&[1.2]), Err(Error::Domain(_))));
        assert!(matches!(mask_confidence(&[-0.1]), Err(Error::Domain(_))));
    }

    fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
        (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
            (
                prop::collection::vec(0u8..2, h * w),
                prop::collection::vec(0u8..2, h * w),
            )
                .prop_map(move |(a, b)| (Mask::from_vec(h, w, a).unwrap(), Mask::from_vec(h, w, b).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn precision_is_antitone_in_threshold((y, p) in mask_pair(), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(precision_at(&y, &p, lo).unwrap() >= precision_at(&y, &p, hi).unwrap());
        }

        #[test]
        fn ap_is_a_multiple_of_a_tenth((y, p) in mask_pair()) {
            let ap = average_precision(&y, &p, &ThresholdVector::default()).unwrap();
            prop_assert!((ap * 10.0 - (ap * 10.0).round()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn mean_ap_ignores_input_order(pairs in prop::collection::vec(mask_pair(), 1..12), seed in any::<u64>()) {
            let named: Vec<(String, Mask, Mask)> = pairs.into_iter().enumerate().map(|(i, (a, b))| (format!("{i}"), a, b)).collect();
            let forward = mean_ap(named.iter().map(|(id, y, p)| (id.as_str(), y, p))).unwrap();
            let mut shuffled = named.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let back = mean_ap(shuffled.iter().map(|(id, y, p)| (id.as_str(), y, p))).unwrap();
            prop_assert_eq!(forward.map_score, back.map_score);
        }

        #[test]
        fn confidence_is_symmetric_and_nonpositive(ps in prop::collection::vec(0.0f32..=1.0, 1..64)) {
            let flipped: Vec<f32> = ps.iter().map(|p| 1.0 - p).collect();
            let a = mask_confidence(&ps).unwrap();
            let b = mask_confidence(&flipped).unwrap();
            prop_assert!(a <= 0.0);
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
