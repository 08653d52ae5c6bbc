//! Seismic patches, masks and everything needed to get them in and out of
//! the network: RLE codec, resize/pad geometry, augmentation, folds,
//! synthetic data and mosaic rendering.

mod augment;
mod folds;
mod geometry;
mod io;
mod mosaic;
mod rle;
mod synthetic;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use augment::{augment, hflip, AugmentConfig};
pub use folds::{make_folds, FoldAssignment};
pub use geometry::{postprocess, preprocess, preprocess_mask, Geometry};
pub use io::{load_dataset, load_image_png, read_label_csv, save_image_png, write_label_csv};
pub use mosaic::{mask_boundary, render_mosaic, MosaicLayout};
pub use rle::{decode_rle, encode_rle};
pub use synthetic::{generate_synthetic, synthetic_split, SyntheticSplit};

/// Side length of a competition patch.
pub const PATCH_SIZE: usize = 101;

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "image buffer of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }
}

/// Binary mask (1 = salt), row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask buffer of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("mask value {v} is not binary")));
        }
        Ok(Self { height, width, data })
    }

    /// Build from a predicate over `(row, col)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|i| f(i / width, i % width) as u8)
            .collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    /// Number of salt pixels.
    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Labeled,
    Unlabeled,
    Holdout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeismicSample {
    pub id: String,
    pub image: Image,
    pub mask: Option<Mask>,
    pub split: SplitTag,
}

impl SeismicSample {
    pub fn new(id: impl Into<String>, image: Image, mask: Option<Mask>, split: SplitTag) -> Result<Self> {
        let id = id.into();
        if let Some(m) = &mask {
            if m.height() != image.height() || m.width() != image.width() {
                return Err(Error::Shape(format!(
                    "sample {id}: mask {}x{} does not match image {}x{}",
                    m.height(),
                    m.width(),
                    image.height(),
                    image.width()
                )));
            }
        }
        Ok(Self { id, image, mask, split })
    }

    /// The same sample without its label and with a new split tag.
    pub fn unlabeled(&self) -> Self {
        Self {
            id: self.id.clone(),
            image: self.image.clone(),
            mask: None,
            split: SplitTag::Unlabeled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GroundTruth,
    Pseudo,
    Mixed,
}

/// Ordered, immutable collection of samples with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<SeismicSample>,
    kind: DatasetKind,
}

impl Dataset {
    pub fn new(samples: Vec<SeismicSample>, kind: DatasetKind) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id `{}`", s.id)));
            }
            if kind == DatasetKind::GroundTruth && s.mask.is_none() {
                return Err(Error::Validation(format!(
                    "ground-truth dataset sample `{}` has no mask",
                    s.id
                )));
            }
        }
        Ok(Self { samples, kind })
    }

    pub fn samples(&self) -> &[SeismicSample] {
        &self.samples
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&SeismicSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Samples whose id satisfies `keep`, preserving order.
    pub fn filter(&self, keep: impl Fn(&SeismicSample) -> bool) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            kind: self.kind,
        }
    }

    /// Concatenation of two datasets; the result is `mixed` unless both agree.
    pub fn union(&self, other: &Dataset) -> Result<Dataset> {
        let kind = if self.kind == other.kind {
            self.kind
        } else {
            DatasetKind::Mixed
        };
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Dataset::new(samples, kind)
    }

    pub fn into_samples(self) -> Vec<SeismicSample> {
        self.samples
    }
}
