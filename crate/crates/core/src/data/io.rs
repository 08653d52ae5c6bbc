use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};

use super::{decode_rle, encode_rle, Dataset, DatasetKind, Image, Mask, SeismicSample, SplitTag};
use crate::{Error, Result};

/// Load an 8-bit grayscale PNG as an image normalised to `[0, 1]`.
pub fn load_image_png(path: &Path, expect_size: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::io(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    if w as usize != expect_size || h as usize != expect_size {
        return Err(Error::Shape(format!(
            "{}: image is {w}x{h}, expected {expect_size}x{expect_size}",
            path.display()
        )));
    }
    Image::new(h as usize, w as usize, img.pixels().map(|p| p.0[0] as f32 / 255.0).collect())
}

pub fn save_image_png(image: &Image, path: &Path) -> Result<()> {
    let mut out = GrayImage::new(image.width() as u32, image.height() as u32);
    for r in 0..image.height() {
        for c in 0..image.width() {
            let v = (image.get(r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(c as u32, r as u32, Luma([v]));
        }
    }
    out.save(path).map_err(|e| Error::io(path, e))
}

/// Read a CSV with header `id,rle_mask` (extra trailing columns allowed).
pub fn read_label_csv(path: &Path, height: usize, width: usize) -> Result<BTreeMap<String, Mask>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e))?;
    let headers = r.headers().map_err(|e| Error::io(path, e))?.clone();
    if headers.len() < 2 || &headers[0] != "id" || &headers[1] != "rle_mask" {
        return Err(Error::Format(format!(
            "{}: expected header starting with `id,rle_mask`",
            path.display()
        )));
    }
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::io(path, e))?;
        let mask = decode_rle(&rec[1], height, width)?;
        if out.insert(rec[0].to_string(), mask).is_some() {
            return Err(Error::Validation(format!(
                "{}: duplicate id `{}`",
                path.display(),
                &rec[0]
            )));
        }
    }
    Ok(out)
}

/// Write `id,rle_mask` rows sorted by id.
pub fn write_label_csv<'a>(path: &Path, masks: impl IntoIterator<Item = (&'a str, &'a Mask)>) -> Result<()> {
    let mut rows: Vec<(&str, &Mask)> = masks.into_iter().collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
    w.write_record(["id", "rle_mask"]).map_err(|e| Error::io(path, e))?;
    for (id, mask) in rows {
        w.write_record([id, &encode_rle(mask)]).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load `<dir>/images/<id>.png` plus optional labels from `<dir>/train.csv`.
///
/// Labels are taken verbatim. Images with a label row are tagged `labeled`,
/// the rest `unlabeled`; samples are ordered by id.
pub fn load_dataset(dir: &Path, patch_size: usize) -> Result<Dataset> {
    let image_dir = dir.join("images");
    let entries = fs::read_dir(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut paths = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&image_dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                paths.insert(stem.to_string(), path.clone());
            }
        }
    }
    let label_path = dir.join("train.csv");
    let labels = if label_path.exists() {
        read_label_csv(&label_path, patch_size, patch_size)?
    } else {
        BTreeMap::new()
    };
    if let Some(id) = labels.keys().find(|id| !paths.contains_key(*id)) {
        return Err(Error::io(image_dir.join(format!("{id}.png")), "labelled image is missing"));
    }
    let mut samples = Vec::with_capacity(paths.len());
    for (id, path) in &paths {
        let image = load_image_png(path, patch_size)?;
        let mask = labels.get(id).cloned();
        let split = if mask.is_some() {
            SplitTag::Labeled
        } else {
            SplitTag::Unlabeled
        };
        samples.push(SeismicSample::new(id.clone(), image, mask, split)?);
    }
    let kind = if !samples.is_empty() && samples.iter().all(|s| s.mask.is_some()) {
        DatasetKind::GroundTruth
    } else {
        DatasetKind::Mixed
    };
    Dataset::new(samples, kind)
}
