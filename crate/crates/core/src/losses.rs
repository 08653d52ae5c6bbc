//! Binary cross-entropy and the Lovász hinge surrogate of the Jaccard loss.
//!
//! Both operate on flat `f64` slices of logits and return the loss
//! together with its gradient with respect to the logits.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// d value / d logit, same layout as the logits.
    pub grad: Vec<f64>,
}

fn check_lengths(logits: &[f64], targets: &[f64]) -> Result<()> {
    if logits.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Shape("loss over zero pixels".into()));
    }
    Ok(())
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Mean pixelwise binary cross-entropy on logits,
/// `max(s, 0) - s*y + ln(1 + exp(-|s|))`.
pub fn bce_loss(logits: &[f64], targets: &[f64]) -> Result<LossValue> {
    check_lengths(logits, targets)?;
    let n = logits.len() as f64;
    let mut value = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&s, &y)| {
            value += s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
            (sigmoid(s) - y) / n
        })
        .collect();
    Ok(LossValue { value: value / n, grad })
}

/// Gradient of the Lovász extension of the Jaccard loss for ground-truth
/// labels already sorted by decreasing error.
pub fn lovasz_grad(sorted_gt: &[f64]) -> Result<Vec<f64>> {
    if sorted_gt.is_empty() {
        return Err(Error::Domain("Lovász gradient of an empty vector".into()));
    }
    let p: f64 = sorted_gt.iter().sum();
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    Ok(sorted_gt
        .iter()
        .map(|&g| {
            cum_fg += g;
            cum_bg += 1.0 - g;
            let intersection = p - cum_fg;
            let union = p + cum_bg;
            let jaccard = 1.0 - intersection / union;
            let step = jaccard - prev;
            prev = jaccard;
            step
        })
        .collect())
}

/// Lovász hinge for one image: hinge errors `1 - (2y-1)s` sorted
/// descending (stable on index), weighted by [`lovasz_grad`].
pub fn lovasz_hinge_image(logits: &[f64], targets: &[f64]) -> Result<LossValue> {
    check_lengths(logits, targets)?;
    let signs: Vec<f64> = targets.iter().map(|&y| 2.0 * y - 1.0).collect();
    let errors: Vec<f64> = logits.iter().zip(&signs).map(|(&s, &sg)| 1.0 - s * sg).collect();
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let sorted_gt: Vec<f64> = order.iter().map(|&i| targets[i]).collect();
    let weights = lovasz_grad(&sorted_gt)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (&i, &w) in order.iter().zip(&weights) {
        if errors[i] > 0.0 {
            value += errors[i] * w;
            grad[i] = -signs[i] * w;
        }
    }
    Ok(LossValue { value, grad })
}

/// Per-image Lovász hinge averaged over a batch of equally sized images
/// laid out back to back.
pub fn lovasz_hinge(logits: &[f64], targets: &[f64], image_len: usize) -> Result<LossValue> {
    check_lengths(logits, targets)?;
    if image_len == 0 || logits.len() % image_len != 0 {
        return Err(Error::Shape(format!(
            "{} pixels do not split into images of {image_len}",
            logits.len()
        )));
    }
    let n_images = (logits.len() / image_len) as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (s, y) in logits.chunks(image_len).zip(targets.chunks(image_len)) {
        let l = lovasz_hinge_image(s, y)?;
        value += l.value;
        grad.extend(l.grad.into_iter().map(|g| g / n_images));
    }
    Ok(LossValue { value: value / n_images, grad })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Jaccard loss of a mispredicted set: |M| / |gt ∪ M|, zero when both are empty.
    fn jaccard_set_loss(gt: &[f64], mispredicted: u32) -> f64 {
        let n = gt.len();
        let m = (0..n).filter(|&i| mispredicted >> i & 1 == 1).count();
        let union = (0..n)
            .filter(|&i| mispredicted >> i & 1 == 1 || gt[i] == 1.0)
            .count();
        if union == 0 {
            0.0
        } else {
            m as f64 / union as f64
        }
    }

    /// Lovász extension through the level-set integral
    /// `∫ F({i : m_i >= t}) dt`, with the set function tabulated over all
    /// `2^n` subsets.
    fn oracle(logits: &[f64], gt: &[f64]) -> f64 {
        let n = gt.len();
        let table: Vec<f64> = (0..1u32 << n).map(|s| jaccard_set_loss(gt, s)).collect();
        let margins: Vec<f64> = logits
            .iter()
            .zip(gt)
            .map(|(&s, &y)| (1.0 - s * (2.0 * y - 1.0)).max(0.0))
            .collect();
        let mut levels: Vec<f64> = margins.iter().copied().filter(|&m| m > 0.0).collect();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        let mut total = 0.0;
        for (k, &v) in levels.iter().enumerate() {
            let next = levels.get(k + 1).copied().unwrap_or(0.0);
            let set = (0..n).filter(|&i| margins[i] >= v).fold(0u32, |acc, i| acc | 1 << i);
            total += (v - next) * table[set as usize];
        }
        total
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let l = bce_loss(&[0.0; 16], &[1.0, 0.0].repeat(8)).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_confident_and_correct_is_near_zero() {
        let l = bce_loss(&[50.0, -50.0, 50.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!(l.value < 1e-20);
        assert!(l.value.is_finite());
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let s: Vec<f64> = (0..64).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let y: Vec<f64> = (0..64).map(|_| rng.gen_range(0..2) as f64).collect();
            let l = bce_loss(&s, &y).unwrap();
            for i in 0..64 {
                let h = 1e-6;
                let mut sp = s.clone();
                sp[i] += h;
                let mut sm = s.clone();
                sm[i] -= h;
                let fd = (bce_loss(&sp, &y).unwrap().value - bce_loss(&sm, &y).unwrap().value) / (2.0 * h);
                assert!((fd - l.grad[i]).abs() <= 1e-5 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn lovasz_grad_examples() {
        assert_eq!(lovasz_grad(&[1.0]).unwrap(), vec![1.0]);
        assert_eq!(lovasz_grad(&[0.0; 5]).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(lovasz_grad(&[]), Err(Error::Domain(_))));
        let g = lovasz_grad(&[1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let total: f64 = g.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lovasz_perfect_margins_give_zero() {
        let y = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let s: Vec<f64> = y.iter().map(|&v| if v == 1.0 { 10.0 } else { -10.0 }).collect();
        let l = lovasz_hinge_image(&s, &y).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn lovasz_two_pixel_case_matches_oracle() {
        let l = lovasz_hinge_image(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((l.value - oracle(&[0.0, 0.0], &[1.0, 0.0])).abs() < 1e-12);
        // Both errors are 1 and the Jaccard loss of mispredicting both pixels is 1.
        assert!((l.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lovasz_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in 1..=8usize {
            for labels in 0..1u32 << n {
                let y: Vec<f64> = (0..n).map(|i| (labels >> i & 1) as f64).collect();
                let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let got = lovasz_hinge_image(&s, &y).unwrap().value;
                assert!((got - oracle(&s, &y)).abs() < 1e-9, "n={n} labels={labels:b}");
            }
        }
    }

    #[test]
    fn lovasz_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let s: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..64).map(|_| rng.gen_range(0..2) as f64).collect();
            let l = lovasz_hinge_image(&s, &y).unwrap();
            let h = 1e-7;
            for i in 0..64 {
                let mut sp = s.clone();
                sp[i] += h;
                let mut sm = s.clone();
                sm[i] -= h;
                let fd = (lovasz_hinge_image(&sp, &y).unwrap().value
                    - lovasz_hinge_image(&sm, &y).unwrap().value)
                    / (2.0 * h);
                assert!((fd - l.grad[i]).abs() <= 1e-4 * fd.abs().max(1e-2), "{fd} vs {}", l.grad[i]);
            }
        }
    }

    #[test]
    fn batch_lovasz_is_mean_of_images() {
        let s = [0.3, -1.0, 2.0, 0.1, -0.4, 0.9];
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let b = lovasz_hinge(&s, &y, 3).unwrap();
        let a = lovasz_hinge_image(&s[..3], &y[..3]).unwrap();
        let c = lovasz_hinge_image(&s[3..], &y[3..]).unwrap();
        assert!((b.value - 0.5 * (a.value + c.value)).abs() < 1e-12);
        assert!(matches!(lovasz_hinge(&s, &y, 4), Err(Error::Shape(_))));
        assert!(matches!(bce_loss(&s, &y[..5]), Err(Error::Shape(_))));
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-3.0f64..3.0, n),
                prop::collection::vec(0u8..2, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            )
        })
    }

    proptest! {
        #[test]
        fn lovasz_is_nonnegative_and_zero_iff_no_margin_violation((s, y) in instance()) {
            let l = lovasz_hinge_image(&s, &y).unwrap();
            prop_assert!(l.value >= -1e-12);
            let violated = s.iter().zip(&y).any(|(&si, &yi)| 1.0 - si * (2.0 * yi - 1.0) > 0.0);
            prop_assert_eq!(l.value > 1e-12, violated);
        }

        #[test]
        fn losses_are_permutation_invariant((s, y) in instance(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let sp: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
            let yp: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let a = lovasz_hinge_image(&s, &y).unwrap().value;
            let b = lovasz_hinge_image(&sp, &yp).unwrap().value;
            prop_assert!((a - b).abs() < 1e-9);
            let a = bce_loss(&s, &y).unwrap().value;
            let b = bce_loss(&sp, &yp).unwrap().value;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn bce_is_midpoint_convex((s, y) in instance(), shift in prop::collection::vec(-3.0f64..3.0, 40)) {
            let t: Vec<f64> = s.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let mid: Vec<f64> = s.iter().zip(&t).map(|(a, b)| 0.5 * (a + b)).collect();
            let f = |v: &[f64]| bce_loss(v, &y).unwrap().value;
            prop_assert!(f(&mid) <= 0.5 * (f(&s) + f(&t)) + 1e-12);
        }
    }
}
