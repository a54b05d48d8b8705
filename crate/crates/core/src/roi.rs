//! Region-of-interest extraction: per-pixel lesion segmentation of adapted
//! tiles and selection of the tiles forwarded to the classifier.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::seed::rng_for;
use crate::tiling::Tile;

pub const N_PIXEL_FEATURES: usize = 6;
pub const DEFAULT_THETA: f64 = 0.05;
const SEGMENTER_HEADER: &str = "wsi-triage-segmenter v1";

#[derive(Debug, Clone, PartialEq)]
pub struct SegMap {
    pub bits: Mask,
    pub positive_fraction: f64,
}

impl SegMap {
    pub fn from_bits(bits: Mask) -> Self {
        let total = bits.width() * bits.height();
        let positive_fraction = if total == 0 {
            0.0
        } else {
            bits.count() as f64 / total as f64
        };
        Self {
            bits,
            positive_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiSelection {
    pub slide_id: String,
    /// Indices into the slide's tile list, ascending (row-major).
    pub selected: Vec<usize>,
}

impl RoiSelection {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Box-filtered color features per pixel: own RGB and the local mean RGB.
fn pixel_features(tile: &Tile, radius: usize) -> Vec<[f64; N_PIXEL_FEATURES]> {
    let (h, w) = (tile.pixels.height(), tile.pixels.width());
    let stride = w + 1;
    let mut integral = vec![[0u32; 3]; (h + 1) * stride];
    for r in 0..h {
        let mut row_sum = [0u32; 3];
        for c in 0..w {
            let p = tile.pixels.get(r, c);
            for k in 0..3 {
                row_sum[k] += u32::from(p[k]);
                integral[(r + 1) * stride + c + 1][k] = integral[r * stride + c + 1][k] + row_sum[k];
            }
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let (r0, r1) = (r.saturating_sub(radius), (r + radius + 1).min(h));
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(radius), (c + radius + 1).min(w));
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            let p = tile.pixels.get(r, c);
            let mut f = [0.0; N_PIXEL_FEATURES];
            for k in 0..3 {
                let s = integral[r1 * stride + c1][k] + integral[r0 * stride + c0][k]
                    - integral[r0 * stride + c1][k]
                    - integral[r1 * stride + c0][k];
                f[k] = f64::from(p[k]) / 255.0;
                f[3 + k] = f64::from(s) / n / 255.0;
            }
            out.push(f);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmenterConfig {
    /// Sample every `pixel_stride`-th pixel along each axis (random phase per tile).
    pub pixel_stride: usize,
    pub newton_iterations: usize,
    pub ridge: f64,
    pub radius: usize,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            pixel_stride: 6,
            newton_iterations: 25,
            ridge: 1e-6,
            radius: 3,
            seed: 0,
        }
    }
}

/// Per-pixel logistic lesion model.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter {
    pub weights: [f64; N_PIXEL_FEATURES],
    pub bias: f64,
    pub radius: usize,
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

impl Segmenter {
    /// Fits the logistic model by Newton iterations on sampled pixels of
    /// adapted tiles against their ground-truth lesion masks.
    pub fn train(samples: &[(Tile, Mask)], cfg: &SegmenterConfig) -> Result<Segmenter> {
        if samples.is_empty() {
            return Err(Error::invalid("segmenter needs at least one training tile"));
        }
        let stride = cfg.pixel_stride.max(1);
        let mut xs: Vec<[f64; N_PIXEL_FEATURES + 1]> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        let mut rng = rng_for(cfg.seed, "segmenter/sampling");
        for (tile, mask) in samples {
            if mask.width() != tile.pixels.width() || mask.height() != tile.pixels.height() {
                return Err(Error::invalid("segmenter training mask does not match its tile"));
            }
            let feats = pixel_features(tile, cfg.radius);
            let (dr, dc) = (rng.gen_range(0..stride), rng.gen_range(0..stride));
            let w = tile.pixels.width();
            for r in (dr..tile.pixels.height()).step_by(stride) {
                for c in (dc..w).step_by(stride) {
                    let f = feats[r * w + c];
                    let mut x = [1.0; N_PIXEL_FEATURES + 1];
                    x[1..].copy_from_slice(&f);
                    xs.push(x);
                    ys.push(if mask.get(r, c) { 1.0 } else { 0.0 });
                }
            }
        }
        let dim = N_PIXEL_FEATURES + 1;
        let mut beta = vec![0.0; dim];
        let ridge = cfg.ridge * xs.len() as f64;
        for _ in 0..cfg.newton_iterations {
            let mut grad = vec![0.0; dim];
            let mut hess = vec![vec![0.0; dim]; dim];
            for (x, &y) in xs.iter().zip(&ys) {
                let z: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
                let p = 1.0 / (1.0 + (-z).exp());
                let wgt = (p * (1.0 - p)).max(1e-12);
                for i in 0..dim {
                    grad[i] += (p - y) * x[i];
                    for j in 0..=i {
                        hess[i][j] += wgt * x[i] * x[j];
                    }
                }
            }
            for i in 0..dim {
                grad[i] += ridge * beta[i];
                hess[i][i] += ridge;
                for j in 0..i {
                    hess[j][i] = hess[i][j];
                }
            }
            let Some(step) = solve(hess, grad) else { break };
            let mut max_step: f64 = 0.0;
            for i in 0..dim {
                beta[i] -= step[i];
                max_step = max_step.max(step[i].abs());
            }
            if max_step < 1e-9 {
                break;
            }
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("segmenter training diverged"));
        }
        let mut weights = [0.0; N_PIXEL_FEATURES];
        weights.copy_from_slice(&beta[1..]);
        Ok(Segmenter {
            weights,
            bias: beta[0],
            radius: cfg.radius,
        })
    }

    pub fn segment(&self, tile: &Tile) -> SegMap {
        let feats = pixel_features(tile, self.radius);
        let bits = feats
            .iter()
            .map(|f| self.bias + f.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() >= 0.0)
            .collect();
        SegMap::from_bits(Mask::from_vec(tile.pixels.width(), tile.pixels.height(), bits).expect("tile shape"))
    }

    pub fn to_text(&self) -> String {
        let w: Vec<String> = self.weights.iter().map(|v| v.to_string()).collect();
        format!(
            "{SEGMENTER_HEADER}\nradius {}\nweights {}\nbias {}\n",
            self.radius,
            w.join(" "),
            self.bias
        )
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == SEGMENTER_HEADER => {}
            _ => return Err(Error::parse(name, 1, format!("expected header `{SEGMENTER_HEADER}`"))),
        }
        let mut field = |key: &str| -> Result<(usize, Vec<String>)> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse(name, 0, format!("missing `{key}`")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(Error::parse(name, i + 1, format!("expected `{key}`")));
            }
            Ok((i + 1, parts.map(str::to_string).collect()))
        };
        let num = |line: usize, s: &str| s.parse::<f64>().map_err(|e| Error::parse(name, line, e.to_string()));
        let (ln, radius) = field("radius")?;
        let radius = radius
            .first()
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| Error::parse(name, ln, "bad radius"))?;
        let (ln, w) = field("weights")?;
        if w.len() != N_PIXEL_FEATURES {
            return Err(Error::parse(name, ln, format!("expected {N_PIXEL_FEATURES} weights")));
        }
        let mut weights = [0.0; N_PIXEL_FEATURES];
        for (slot, v) in weights.iter_mut().zip(&w) {
            *slot = num(ln, v)?;
        }
        let (ln, b) = field("bias")?;
        let bias = num(ln, b.first().map(String::as_str).unwrap_or(""))?;
        Ok(Segmenter { weights, bias, radius })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Selects tiles whose segmentation-map positive fraction reaches `theta`.
pub fn select(tiles: &[Tile], segmaps: &[SegMap], theta: f64) -> Result<RoiSelection> {
    if tiles.len() != segmaps.len() {
        return Err(Error::invalid(format!(
            "{} tiles but {} segmentation maps",
            tiles.len(),
            segmaps.len()
        )));
    }
    let slide_id = tiles.first().map(|t| t.slide_id.clone()).unwrap_or_default();
    let selected = segmaps
        .iter()
        .enumerate()
        .filter(|(_, m)| m.positive_fraction >= theta)
        .map(|(i, _)| i)
        .collect();
    Ok(RoiSelection { slide_id, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::RgbImage;
    use crate::label::ClassLabel;
    use crate::synth::{default_labs, generate_slide};
    use crate::tiling::{segment_tissue, tile, TilingParams};
    use proptest::prelude::*;

    fn lesion_samples(seeds: std::ops::Range<u64>) -> Vec<(Tile, Mask)> {
        let params = TilingParams::default();
        let mut reference = default_labs()[0].clone();
        reference.artifact_rates = Default::default();
        let mut out = Vec::new();
        for s in seeds {
            let slide = generate_slide(ClassLabel::ALL[(s % 4) as usize], &reference, s);
            let tiles = tile("t", &slide.raster, &segment_tissue(&slide.raster, &params), &params).unwrap();
            for t in tiles {
                let m = slide.roi_mask.crop(t.origin.0, t.origin.1, 128, 128);
                out.push((t, m));
            }
        }
        out
    }

    fn map_with(fractions: &[f64]) -> Vec<SegMap> {
        fractions
            .iter()
            .map(|f| SegMap {
                bits: Mask::new(128, 128),
                positive_fraction: *f,
            })
            .collect()
    }

    fn dummy_tiles(n: usize) -> Vec<Tile> {
        (0..n)
            .map(|i| Tile::from_pixels("s", (0, 128 * i), RgbImage::filled(128, 128, [200, 100, 150]), &TilingParams::default()))
            .collect()
    }

    #[test]
    fn threshold_rule_selects_tiles_three_and_four() {
        let sel = select(&dummy_tiles(4), &map_with(&[0.0, 0.04, 0.05, 0.9]), 0.05).unwrap();
        assert_eq!(sel.selected, vec![2, 3]);
    }

    #[test]
    fn zero_maps_give_empty_selection_and_theta_zero_takes_all() {
        let tiles = dummy_tiles(3);
        assert!(select(&tiles, &map_with(&[0.0; 3]), 0.05).unwrap().is_empty());
        assert_eq!(select(&tiles, &map_with(&[0.0; 3]), 0.0).unwrap().selected.len(), 3);
        assert!(select(&tiles, &map_with(&[0.0; 2]), 0.05).is_err());
    }

    #[test]
    fn positive_fraction_is_exact() {
        let mut bits = Mask::new(128, 128);
        for i in 0..1000 {
            bits.set(i / 128, i % 128, true);
        }
        let m = SegMap::from_bits(bits);
        assert_eq!(m.positive_fraction, 1000.0 / 16384.0);
        assert_eq!(m.positive_fraction, m.bits.count() as f64 / 16384.0);
    }

    #[test]
    fn trained_segmenter_tracks_ground_truth() {
        let seg = Segmenter::train(&lesion_samples(0..8), &SegmenterConfig::default()).unwrap();
        let background = Tile::from_pixels("b", (0, 0), RgbImage::filled(128, 128, [235, 235, 235]), &TilingParams::default());
        assert_eq!(seg.segment(&background).bits.count(), 0);

        let held_out = lesion_samples(100..108);
        let lesion_tiles: Vec<&(Tile, Mask)> = held_out.iter().filter(|(_, m)| m.fraction() > 0.05).collect();
        assert!(!lesion_tiles.is_empty());
        let mut within = 0;
        for (t, m) in &lesion_tiles {
            let map = seg.segment(t);
            assert_eq!(map.positive_fraction, map.bits.count() as f64 / 16384.0);
            if (map.positive_fraction - m.fraction()).abs() <= 0.15 {
                within += 1;
            }
        }
        let rate = within as f64 / lesion_tiles.len() as f64;
        assert!(rate >= 0.9, "only {rate} of lesion tiles within 0.15");
    }

    #[test]
    fn persistence_round_trips() {
        let seg = Segmenter {
            weights: [0.1, -2.5, 3.25, 1e-7, -0.333333333333, 9.0],
            bias: -1.5,
            radius: 3,
        };
        assert_eq!(Segmenter::parse(&seg.to_text(), "s").unwrap(), seg);
        assert!(Segmenter::parse("wsi-triage-segmenter v1\nradius 3\nweights 1 2\nbias 0\n", "s").is_err());
    }

    proptest! {
        #[test]
        fn raising_theta_never_adds_tiles(fracs in proptest::collection::vec(0.0f64..1.0, 1..20), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = (a.min(b), a.max(b));
            let tiles = dummy_tiles(fracs.len());
            let maps = map_with(&fracs);
            let low = select(&tiles, &maps, lo).unwrap().selected;
            let high = select(&tiles, &maps, hi).unwrap().selected;
            prop_assert!(high.iter().all(|i| low.contains(i)));
        }
    }
}
