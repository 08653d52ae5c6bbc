use image::{Rgb, RgbImage};

use super::{Dataset, Mask, PATCH_SIZE};
use crate::{Error, Result};

const OVERLAY: Rgb<u8> = Rgb([255, 40, 40]);

/// Grid of optional sample ids; `None` cells render black.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MosaicLayout {
    pub grid: Vec<Vec<Option<String>>>,
    pub cell_size: usize,
}

impl MosaicLayout {
    /// Fill `rows x cols` row-major from `ids`; surplus cells stay empty.
    pub fn from_ids(ids: &[String], rows: usize, cols: usize, cell_size: usize) -> Self {
        let mut it = ids.iter();
        let grid = (0..rows)
            .map(|_| (0..cols).map(|_| it.next().cloned()).collect())
            .collect();
        Self { grid, cell_size }
    }

    pub fn with_patch_cells(grid: Vec<Vec<Option<String>>>) -> Self {
        Self {
            grid,
            cell_size: PATCH_SIZE,
        }
    }

    pub fn rows(&self) -> usize {
        self.grid.len()
    }

    pub fn cols(&self) -> usize {
        self.grid.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Salt pixels with at least one 4-neighbour outside the salt region.
pub fn mask_boundary(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |r, c| {
        mask.get(r, c)
            && [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)].iter().any(|&(dr, dc)| {
                let (nr, nc) = (r as i32 + dr, c as i32 + dc);
                nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w && !mask.get(nr as usize, nc as usize)
            })
    })
}

pub fn render_mosaic(layout: &MosaicLayout, dataset: &Dataset) -> Result<RgbImage> {
    let cell = layout.cell_size;
    let (rows, cols) = (layout.rows(), layout.cols());
    let mut out = RgbImage::new((cols * cell) as u32, (rows * cell) as u32);
    for (gr, row) in layout.grid.iter().enumerate() {
        for (gc, id) in row.iter().enumerate() {
            let Some(id) = id else { continue };
            let sample = dataset.get(id).ok_or_else(|| Error::Lookup(id.clone()))?;
            if sample.image.height() != cell || sample.image.width() != cell {
                return Err(Error::Shape(format!(
                    "sample `{id}` is {}x{}, mosaic cells are {cell}x{cell}",
                    sample.image.height(),
                    sample.image.width()
                )));
            }
            let boundary = sample.mask.as_ref().map(mask_boundary);
            for r in 0..cell {
                for c in 0..cell {
                    let px = if boundary.as_ref().is_some_and(|b| b.get(r, c)) {
                        OVERLAY
                    } else {
                        let g = (sample.image.get(r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                        Rgb([g, g, g])
                    };
                    out.put_pixel((gc * cell + c) as u32, (gr * cell + r) as u32, px);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetKind, Image, SeismicSample, SplitTag};

    fn dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let mask = Mask::from_fn(101, 101, |r, c| r > 40 && c > 30 && r < 80);
                SeismicSample::new(format!("p{i}"), Image::filled(101, 101, 0.6), Some(mask), SplitTag::Labeled)
                    .unwrap()
            })
            .collect();
        Dataset::new(samples, DatasetKind::GroundTruth).unwrap()
    }

    #[test]
    fn single_cell_mosaic() {
        let d = dataset(1);
        let img = render_mosaic(&MosaicLayout::with_patch_cells(vec![vec![Some("p0".into())]]), &d).unwrap();
        assert_eq!(img.dimensions(), (101, 101));
        assert_eq!(img.get_pixel(0, 0), &Rgb([153, 153, 153]));
        // Top edge of the salt rectangle is boundary.
        assert_eq!(img.get_pixel(50, 41), &OVERLAY);
        // Interior is not.
        assert_eq!(img.get_pixel(50, 60), &Rgb([153, 153, 153]));
    }

    #[test]
    fn six_by_twelve_mosaic_dimensions() {
        let d = dataset(72);
        let layout = MosaicLayout::from_ids(&d.ids(), 6, 12, 101);
        let img = render_mosaic(&layout, &d).unwrap();
        assert_eq!(img.dimensions(), (1212, 606));
    }

    #[test]
    fn empty_cells_are_black() {
        let d = dataset(1);
        let layout = MosaicLayout::with_patch_cells(vec![vec![Some("p0".into()), None]]);
        let img = render_mosaic(&layout, &d).unwrap();
        for y in 0..101 {
            for x in 101..202 {
                assert_eq!(img.get_pixel(x, y), &Rgb([0, 0, 0]));
            }
        }
    }

    #[test]
    fn unknown_id_is_lookup_error() {
        let d = dataset(1);
        let layout = MosaicLayout::with_patch_cells(vec![vec![Some("nope".into())]]);
        assert!(matches!(render_mosaic(&layout, &d), Err(Error::Lookup(_))));
    }

    #[test]
    fn boundary_of_full_and_empty_masks() {
        assert!(mask_boundary(&Mask::zeros(5, 5)).is_empty());
        // A full mask has no interior/exterior transition inside the patch.
        assert!(mask_boundary(&Mask::ones(5, 5)).is_empty());
    }
}
