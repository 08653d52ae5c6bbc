use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{reflect_index, resize_bilinear_plane};
use super::{Image, Mask, SeismicSample};

/// Train-time augmentation. Only the horizontal flip is on by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    /// Maximum integer translation in pixels (0 disables).
    pub max_shift: usize,
    /// Maximum relative zoom-in, e.g. 0.1 for up to 10% (0 disables).
    pub max_scale: f64,
    /// Brightness offset and contrast deviation amplitude (0 disables).
    pub intensity_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            max_shift: 0,
            max_scale: 0.0,
            intensity_jitter: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            hflip_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Horizontal mirror of image and mask.
pub fn hflip(sample: &SeismicSample) -> SeismicSample {
    SeismicSample {
        id: sample.id.clone(),
        image: sample.image.flip_horizontal(),
        mask: sample.mask.as_ref().map(Mask::flip_horizontal),
        split: sample.split,
    }
}

pub fn augment(sample: &SeismicSample, config: &AugmentConfig, rng: &mut impl Rng) -> SeismicSample {
    let mut out = sample.clone();
    if config.hflip_prob > 0.0 && rng.gen_bool(config.hflip_prob.min(1.0)) {
        out = hflip(&out);
    }
    if config.max_scale > 0.0 {
        let zoom = 1.0 + rng.gen_range(0.0..=config.max_scale);
        out = zoom_center(&out, zoom);
    }
    if config.max_shift > 0 {
        let s = config.max_shift as isize;
        let (dy, dx) = (rng.gen_range(-s..=s), rng.gen_range(-s..=s));
        out = shift(&out, dy, dx);
    }
    if config.intensity_jitter > 0.0 {
        let j = config.intensity_jitter;
        let brightness = rng.gen_range(-j..=j) as f32;
        let contrast = 1.0 + rng.gen_range(-j..=j) as f32;
        for v in out.image.data_mut() {
            *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
        }
    }
    out
}

fn shift(sample: &SeismicSample, dy: isize, dx: isize) -> SeismicSample {
    let (h, w) = (sample.image.height(), sample.image.width());
    let src = |r: usize, c: usize| {
        (
            reflect_index(r as isize - dy, h),
            reflect_index(c as isize - dx, w),
        )
    };
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = src(r, c);
            data.push(sample.image.get(sr, sc));
        }
    }
    let mask = sample.mask.as_ref().map(|m| {
        Mask::from_fn(h, w, |r, c| {
            let (sr, sc) = src(r, c);
            m.get(sr, sc)
        })
    });
    SeismicSample {
        id: sample.id.clone(),
        image: Image::new(h, w, data).expect("same extent"),
        mask,
        split: sample.split,
    }
}

fn zoom_center(sample: &SeismicSample, zoom: f64) -> SeismicSample {
    let (h, w) = (sample.image.height(), sample.image.width());
    let ch = ((h as f64 / zoom).round() as usize).clamp(1, h);
    let cw = ((w as f64 / zoom).round() as usize).clamp(1, w);
    let (r0, c0) = ((h - ch) / 2, (w - cw) / 2);
    let mut crop = Vec::with_capacity(ch * cw);
    for r in r0..r0 + ch {
        crop.extend_from_slice(&sample.image.data()[r * w + c0..r * w + c0 + cw]);
    }
    let data = resize_bilinear_plane(&crop, ch, cw, h, w);
    let mask = sample.mask.as_ref().map(|m| {
        Mask::from_fn(h, w, |r, c| {
            let sr = r0 + ((2 * r + 1) * ch / (2 * h)).min(ch - 1);
            let sc = c0 + ((2 * c + 1) * cw / (2 * w)).min(cw - 1);
            m.get(sr, sc)
        })
    });
    SeismicSample {
        id: sample.id.clone(),
        image: Image::new(h, w, data).expect("same extent"),
        mask,
        split: sample.split,
    }
}
