//! Tissue segmentation and decomposition of a slide into fixed-size tiles.

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};

pub const TILE_PX: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TilingParams {
    /// Minimum HSV saturation for a pixel to count as tissue.
    pub s_min: f64,
    /// Maximum normalized luminance below which a pixel counts as tissue.
    pub l_max: f64,
    pub min_tissue_fraction: f64,
    pub tile_px: usize,
}

impl Default for TilingParams {
    fn default() -> Self {
        Self {
            s_min: 0.08,
            l_max: 0.82,
            min_tissue_fraction: 0.25,
            tile_px: TILE_PX,
        }
    }
}

pub type TissueMask = Mask;

#[inline]
pub fn saturation(p: [u8; 3]) -> f64 {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    if max == 0 {
        0.0
    } else {
        f64::from(max - min) / f64::from(max)
    }
}

/// Rec. 601 luma, normalized to [0, 1].
#[inline]
pub fn luminance(p: [u8; 3]) -> f64 {
    (0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])) / 255.0
}

#[inline]
pub fn is_tissue(p: [u8; 3], params: &TilingParams) -> bool {
    saturation(p) >= params.s_min || luminance(p) <= params.l_max
}

pub fn segment_tissue(raster: &RgbImage, params: &TilingParams) -> TissueMask {
    let data = raster.pixels().map(|p| is_tissue(p, params)).collect();
    Mask::from_vec(raster.width(), raster.height(), data).expect("mask matches raster shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub slide_id: String,
    /// (row, col) of the top-left pixel; multiples of the tile size.
    pub origin: (usize, usize),
    pub pixels: RgbImage,
    pub tissue: Mask,
    pub tissue_fraction: f64,
}

impl Tile {
    pub fn size(&self) -> usize {
        self.pixels.width()
    }

    /// Builds a tile whose tissue mask is recomputed from its own pixels.
    pub fn from_pixels(slide_id: &str, origin: (usize, usize), pixels: RgbImage, params: &TilingParams) -> Tile {
        let tissue = segment_tissue(&pixels, params);
        let tissue_fraction = tissue.fraction();
        Tile {
            slide_id: slide_id.to_string(),
            origin,
            pixels,
            tissue,
            tissue_fraction,
        }
    }
}

/// Non-overlapping grid-aligned tiles whose tissue fraction reaches
/// `min_tissue_fraction`, in row-major order. Edge remainders are dropped.
pub fn tile(slide_id: &str, raster: &RgbImage, mask: &TissueMask, params: &TilingParams) -> Result<Vec<Tile>> {
    if mask.width() != raster.width() || mask.height() != raster.height() {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match raster {}x{}",
            mask.width(),
            mask.height(),
            raster.width(),
            raster.height()
        )));
    }
    let size = params.tile_px;
    if size == 0 {
        return Err(Error::invalid("tile size must be positive"));
    }
    let mut tiles = Vec::new();
    for gr in 0..raster.height() / size {
        for gc in 0..raster.width() / size {
            let (row, col) = (gr * size, gc * size);
            let tissue = mask.crop(row, col, size, size);
            let tissue_fraction = tissue.fraction();
            if tissue_fraction >= params.min_tissue_fraction {
                tiles.push(Tile {
                    slide_id: slide_id.to_string(),
                    origin: (row, col),
                    pixels: raster.crop(row, col, size, size),
                    tissue,
                    tissue_fraction,
                });
            }
        }
    }
    Ok(tiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_raster_has_no_tissue() {
        let img = RgbImage::filled(64, 32, [255, 255, 255]);
        assert_eq!(segment_tissue(&img, &TilingParams::default()).count(), 0);
        let glass = RgbImage::filled(64, 32, [235, 235, 235]);
        assert_eq!(segment_tissue(&glass, &TilingParams::default()).count(), 0);
    }

    #[test]
    fn saturated_pink_is_all_tissue() {
        let img = RgbImage::filled(64, 32, [255, 105, 180]);
        assert_eq!(segment_tissue(&img, &TilingParams::default()).count(), 64 * 32);
    }

    #[test]
    fn dark_gray_is_tissue_by_luminance() {
        let img = RgbImage::filled(4, 4, [100, 100, 100]);
        assert_eq!(segment_tissue(&img, &TilingParams::default()).count(), 16);
    }

    #[test]
    fn grid_of_four() {
        let img = RgbImage::filled(256, 256, [200, 100, 150]);
        let params = TilingParams::default();
        let mask = segment_tissue(&img, &params);
        let tiles = tile("s", &img, &mask, &params).unwrap();
        let origins: Vec<_> = tiles.iter().map(|t| t.origin).collect();
        assert_eq!(origins, vec![(0, 0), (0, 128), (128, 0), (128, 128)]);
        assert!(tiles.iter().all(|t| t.pixels.width() == 128 && t.pixels.height() == 128));
    }

    #[test]
    fn blank_slide_has_no_tiles_and_edges_are_dropped() {
        let params = TilingParams::default();
        let blank = RgbImage::filled(300, 300, [235, 235, 235]);
        assert!(tile("b", &blank, &segment_tissue(&blank, &params), &params).unwrap().is_empty());
        let tissue = RgbImage::filled(300, 200, [150, 50, 120]);
        let tiles = tile("t", &tissue, &segment_tissue(&tissue, &params), &params).unwrap();
        assert_eq!(tiles.len(), 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let img = RgbImage::new(128, 128);
        assert!(tile("x", &img, &Mask::new(64, 128), &TilingParams::default()).is_err());
    }

    #[test]
    fn lowering_min_fraction_never_removes_tiles() {
        let mut img = RgbImage::filled(512, 512, [235, 235, 235]);
        for r in 0..512 {
            for c in 0..(r * 3 / 2).min(512) {
                img.put(r, c, [180, 90, 160]);
            }
        }
        let mask = segment_tissue(&img, &TilingParams::default());
        let mut prev: Vec<(usize, usize)> = Vec::new();
        for k in (0..=10).rev() {
            let params = TilingParams {
                min_tissue_fraction: k as f64 / 10.0,
                ..TilingParams::default()
            };
            let origins: Vec<_> = tile("m", &img, &mask, &params).unwrap().iter().map(|t| t.origin).collect();
            assert!(prev.iter().all(|o| origins.contains(o)));
            prev = origins;
        }
    }
}
