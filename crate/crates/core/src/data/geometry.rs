use serde::{Deserialize, Serialize};

use super::{Image, Mask};
use crate::nn::bilinear_taps;
use crate::{Error, Result};

/// Patch geometry between the stored resolution and the network input:
/// resize `source -> scaled`, then reflect-pad symmetrically to `padded`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub source: usize,
    pub scaled: usize,
    pub padded: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self::COMPETITION
    }
}

impl Geometry {
    /// 101 -> 202 -> 256.
    pub const COMPETITION: Geometry = Geometry {
        source: 101,
        scaled: 202,
        padded: 256,
    };

    pub fn new(source: usize, scaled: usize, padded: usize) -> Result<Self> {
        let g = Self { source, scaled, padded };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source == 0 || self.scaled == 0 {
            return Err(Error::Config("geometry sizes must be positive".into()));
        }
        if self.padded < self.scaled || (self.padded - self.scaled) % 2 != 0 {
            return Err(Error::Config(format!(
                "padded size {} must exceed scaled size {} by an even amount",
                self.padded, self.scaled
            )));
        }
        if self.pad() >= self.scaled {
            return Err(Error::Config(format!(
                "reflection pad {} needs a scaled size above it (got {})",
                self.pad(),
                self.scaled
            )));
        }
        Ok(())
    }

    /// Padding added on each side.
    pub fn pad(&self) -> usize {
        (self.padded - self.scaled) / 2
    }

    fn check(&self, what: &str, h: usize, w: usize, expect: usize) -> Result<()> {
        if h != expect || w != expect {
            return Err(Error::Shape(format!(
                "{what} must be {expect}x{expect}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    pub fn preprocess_image(&self, image: &Image) -> Result<Image> {
        self.check("input image", image.height(), image.width(), self.source)?;
        let resized = resize_bilinear_plane(image.data(), self.source, self.source, self.scaled, self.scaled);
        let padded = reflect_pad(&resized, self.scaled, self.pad());
        Image::new(self.padded, self.padded, padded)
    }

    pub fn preprocess_mask(&self, mask: &Mask) -> Result<Mask> {
        self.check("input mask", mask.height(), mask.width(), self.source)?;
        let (s, t) = (self.source, self.scaled);
        let idx: Vec<usize> = (0..t).map(|o| ((2 * o + 1) * s / (2 * t)).min(s - 1)).collect();
        let mut resized = vec![0u8; t * t];
        for (r, &sr) in idx.iter().enumerate() {
            for (c, &sc) in idx.iter().enumerate() {
                resized[r * t + c] = mask.data()[sr * s + sc];
            }
        }
        Mask::from_vec(self.padded, self.padded, reflect_pad(&resized, t, self.pad()))
    }

    /// Crop the central scaled region and resample back to the source size.
    pub fn postprocess(&self, prediction: &Image) -> Result<Image> {
        self.check("prediction", prediction.height(), prediction.width(), self.padded)?;
        self.postprocess_plane(prediction.data())
    }

    pub fn postprocess_plane(&self, plane: &[f32]) -> Result<Image> {
        if plane.len() != self.padded * self.padded {
            return Err(Error::Shape(format!(
                "prediction must hold {} values, got {}",
                self.padded * self.padded,
                plane.len()
            )));
        }
        let (p, t) = (self.pad(), self.scaled);
        let mut crop = Vec::with_capacity(t * t);
        for r in p..p + t {
            crop.extend_from_slice(&plane[r * self.padded + p..r * self.padded + p + t]);
        }
        let out = resize_bilinear_plane(&crop, t, t, self.source, self.source);
        Image::new(self.source, self.source, out)
    }
}

/// Competition preprocessing: 101x101 -> 202x202 (bilinear) -> 256x256 (reflection padded).
pub fn preprocess(image: &Image) -> Result<Image> {
    Geometry::COMPETITION.preprocess_image(image)
}

/// Nearest-neighbour counterpart of [`preprocess`] for masks.
pub fn preprocess_mask(mask: &Mask) -> Result<Mask> {
    Geometry::COMPETITION.preprocess_mask(mask)
}

/// Inverse of [`preprocess`]: 256x256 -> central 202x202 -> 101x101.
pub fn postprocess(prediction: &Image) -> Result<Image> {
    Geometry::COMPETITION.postprocess(prediction)
}

pub(crate) fn resize_bilinear_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, wy0, wy1) in &ty {
        for &(x0, x1, wx0, wx1) in &tx {
            let v = wy0 * (wx0 * src[y0 * w + x0] as f64 + wx1 * src[y0 * w + x1] as f64)
                + wy1 * (wx0 * src[y1 * w + x0] as f64 + wx1 * src[y1 * w + x1] as f64);
            out.push(v as f32);
        }
    }
    out
}

/// Reflect index `i` (may be negative or past the end) into `0..n`,
/// mirroring about the edge pixels.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

fn reflect_pad<T: Copy>(src: &[T], n: usize, pad: usize) -> Vec<T> {
    let out_n = n + 2 * pad;
    let mut out = Vec::with_capacity(out_n * out_n);
    for r in 0..out_n {
        let sr = reflect_index(r as isize - pad as isize, n);
        for c in 0..out_n {
            let sc = reflect_index(c as isize - pad as isize, n);
            out.push(src[sr * n + sc]);
        }
    }
    out
}
