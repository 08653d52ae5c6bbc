use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, DatasetKind, Image, Mask, SeismicSample, SplitTag};
use crate::{Error, Result};

/// Probability that a generated patch contains salt.
const SALT_PROB: f64 = 0.6;

/// Layered-sediment patches with smooth salt blobs of a distinct, unlayered
/// texture. Each sample draws from its own ChaCha stream, so sample `i` is
/// the same for every `n > i`.
pub fn generate_synthetic(n: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || image_size < 8 {
        return Err(Error::Config(format!(
            "synthetic dataset needs n > 0 and size >= 8 (got n={n}, size={image_size})"
        )));
    }
    let samples = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            synth_sample(format!("syn{i:05}"), image_size, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, DatasetKind::GroundTruth)
}

/// Disjoint labeled, unlabeled and holdout sets drawn from one synthetic
/// stream. Pool images carry no masks; ids are shared with the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub labeled: Dataset,
    pub pool: Dataset,
    pub holdout: Dataset,
}

pub fn synthetic_split(labeled: usize, pool: usize, holdout: usize, image_size: usize, seed: u64) -> Result<SyntheticSplit> {
    let all = generate_synthetic(labeled + pool + holdout, image_size, seed)?.into_samples();
    let mut it = all.into_iter();
    let take = |it: &mut std::vec::IntoIter<SeismicSample>, n: usize, tag: SplitTag| -> Vec<SeismicSample> {
        it.by_ref()
            .take(n)
            .map(|s| match tag {
                SplitTag::Unlabeled => s.unlabeled(),
                _ => SeismicSample { split: tag, ..s },
            })
            .collect()
    };
    let l = take(&mut it, labeled, SplitTag::Labeled);
    let p = take(&mut it, pool, SplitTag::Unlabeled);
    let h = take(&mut it, holdout, SplitTag::Holdout);
    Ok(SyntheticSplit {
        labeled: Dataset::new(l, DatasetKind::GroundTruth)?,
        pool: Dataset::new(p, DatasetKind::Mixed)?,
        holdout: Dataset::new(h, DatasetKind::GroundTruth)?,
    })
}

fn synth_sample(id: String, size: usize, rng: &mut ChaCha8Rng) -> Result<SeismicSample> {
    let s = size as f64;
    let noise = Normal::new(0.0, 1.0).unwrap();

    // Sediment: a few superposed sinusoids along a tilted, undulating depth axis.
    let tilt = rng.gen_range(-0.35..0.35);
    let undulation = rng.gen_range(0.0..s / 12.0);
    let wavelength = rng.gen_range(s / 2.0..2.0 * s);
    let phase = rng.gen_range(0.0..TAU);
    let layers: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.4..1.0),
                rng.gen_range(s / 18.0..s / 5.0),
                rng.gen_range(0.0..TAU),
            )
        })
        .collect();
    let norm: f64 = layers.iter().map(|l| l.0).sum();
    let sediment_contrast = rng.gen_range(0.25..0.4);

    let salt = rng.gen_bool(SALT_PROB).then(|| {
        let radius = rng.gen_range(0.15 * s..0.45 * s);
        let harmonics: Vec<(f64, f64)> = (2..5)
            .map(|_| (rng.gen_range(-0.15..0.15), rng.gen_range(0.0..TAU)))
            .collect();
        let center = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let level = rng.gen_range(0.42..0.62);
        (center, radius, harmonics, level)
    });

    let mut data = Vec::with_capacity(size * size);
    let mut mask = Mask::zeros(size, size);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64, c as f64);
            let depth = y + tilt * x + undulation * (TAU * x / wavelength + phase).sin();
            let layered: f64 = layers
                .iter()
                .map(|&(amp, period, ph)| amp * (TAU * depth / period + ph).sin())
                .sum::<f64>()
                / norm;
            let mut v = 0.5 + sediment_contrast * layered + 0.03 * noise.sample(rng);
            if let Some(((cy, cx), radius, harmonics, level)) = &salt {
                let (dy, dx) = (y - cy, x - cx);
                let theta = dy.atan2(dx);
                let boundary = radius
                    * (1.0
                        + harmonics
                            .iter()
                            .enumerate()
                            .map(|(k, &(b, ph))| b * ((k + 2) as f64 * theta + ph).cos())
                            .sum::<f64>());
                if dy.hypot(dx) < boundary {
                    mask.set(r, c, true);
                    v = level + 0.05 * layered + 0.06 * noise.sample(rng);
                }
            }
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    SeismicSample::new(id, Image::new(size, size, data)?, Some(mask), SplitTag::Labeled)
}
