//! Deterministic synthetic multi-lab slide corpus.
//!
//! Each slide is rendered in a reference appearance (near-white glass, a
//! connected pink tissue region, and a class-specific lesion texture), then
//! pushed through its lab's color profile with Gaussian noise, and finally
//! hit by randomly drawn acquisition artifacts.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{write_pgm, write_ppm, Mask, RgbImage};
use crate::label::ClassLabel;
use crate::manifest::{save_manifest, DatasetManifest, SlideRecord};
use crate::seed::{derive_seed, rng_for};

pub const BACKGROUND_LEVEL: u8 = 235;
const STROMA: [f64; 3] = [226.0, 168.0, 204.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArtifactKind {
    PenInk,
    BlurPatch,
    Bubble,
    Blank,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 4] = [
        ArtifactKind::PenInk,
        ArtifactKind::BlurPatch,
        ArtifactKind::Bubble,
        ArtifactKind::Blank,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::PenInk => "pen_ink",
            ArtifactKind::BlurPatch => "blur_patch",
            ArtifactKind::Bubble => "bubble",
            ArtifactKind::Blank => "blank",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArtifactKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown artifact kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ArtifactRates {
    pub pen_ink: f64,
    pub blur_patch: f64,
    pub bubble: f64,
    pub blank: f64,
}

impl ArtifactRates {
    pub fn rate(&self, kind: ArtifactKind) -> f64 {
        match kind {
            ArtifactKind::PenInk => self.pen_ink,
            ArtifactKind::BlurPatch => self.blur_patch,
            ArtifactKind::Bubble => self.bubble,
            ArtifactKind::Blank => self.blank,
        }
    }

    /// Rates seen on an uncurated accession stream.
    pub fn typical() -> Self {
        Self {
            pen_ink: 0.03,
            blur_patch: 0.03,
            bubble: 0.03,
            blank: 0.02,
        }
    }
}

/// Per-lab appearance: an affine color transform plus noise and artifact rates.
#[derive(Debug, Clone, PartialEq)]
pub struct LabProfile {
    pub lab_id: String,
    pub color_matrix: [[f64; 3]; 3],
    pub color_offset: [f64; 3],
    pub noise_sigma: f64,
    pub artifact_rates: ArtifactRates,
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl LabProfile {
    pub fn new(
        lab_id: impl Into<String>,
        color_matrix: [[f64; 3]; 3],
        color_offset: [f64; 3],
        noise_sigma: f64,
        artifact_rates: ArtifactRates,
    ) -> Result<Self> {
        if det3(&color_matrix).abs() <= 1e-6 {
            return Err(Error::invalid("lab color matrix is singular"));
        }
        if !(noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        for k in ArtifactKind::ALL {
            let r = artifact_rates.rate(k);
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("artifact rate for {k} outside [0, 1]")));
            }
        }
        Ok(Self {
            lab_id: lab_id.into(),
            color_matrix,
            color_offset,
            noise_sigma,
            artifact_rates,
        })
    }

    /// Identity transform, no noise, no artifacts.
    pub fn identity(lab_id: impl Into<String>) -> Self {
        Self {
            lab_id: lab_id.into(),
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            color_offset: [0.0; 3],
            noise_sigma: 0.0,
            artifact_rates: ArtifactRates::default(),
        }
    }

    /// Stain-like shift that scales each channel's deviation from white glass
    /// and mixes a little of the other channels in. Glass stays put.
    pub fn stain_shift(
        lab_id: impl Into<String>,
        gains: [f64; 3],
        cross: f64,
        noise_sigma: f64,
        artifact_rates: ArtifactRates,
    ) -> Result<Self> {
        let mut m = [[0.0; 3]; 3];
        for (c, row) in m.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = if c == k { gains[c] } else { cross };
            }
        }
        let bg = f64::from(BACKGROUND_LEVEL);
        let offset = [0, 1, 2].map(|c| bg * (1.0 - m[c].iter().sum::<f64>()));
        Self::new(lab_id, m, offset, noise_sigma, artifact_rates)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.color_matrix;
        [0, 1, 2].map(|c| m[c][0] * p[0] + m[c][1] * p[1] + m[c][2] * p[2] + self.color_offset[c])
    }

    /// Inverse of [`LabProfile::apply`] (noise excluded).
    pub fn invert(&self, q: [f64; 3]) -> [f64; 3] {
        let m = &self.color_matrix;
        let d = det3(m);
        let inv = [
            [
                (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / d,
                (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / d,
                (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / d,
            ],
            [
                (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / d,
                (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / d,
                (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / d,
            ],
            [
                (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / d,
                (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / d,
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / d,
            ],
        ];
        let y = [0, 1, 2].map(|c| q[c] - self.color_offset[c]);
        [0, 1, 2].map(|c| inv[c][0] * y[0] + inv[c][1] * y[1] + inv[c][2] * y[2])
    }
}

/// A reference lab plus three visibly different sites.
pub fn default_labs() -> Vec<LabProfile> {
    let rates = ArtifactRates::typical();
    let mut reference = LabProfile::identity("ref");
    reference.noise_sigma = 4.0;
    reference.artifact_rates = rates;
    vec![
        reference,
        LabProfile::stain_shift("lab-a", [0.78, 0.92, 1.10], 0.04, 5.0, rates).expect("valid profile"),
        LabProfile::stain_shift("lab-b", [1.12, 0.80, 0.86], -0.05, 6.0, rates).expect("valid profile"),
        LabProfile::stain_shift("lab-c", [0.88, 1.14, 0.80], 0.06, 5.0, rates).expect("valid profile"),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arrangement {
    NestedClusters,
    Ridges,
    DenseIslands,
    SparseBackground,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureRecipe {
    pub class: ClassLabel,
    /// Islands, clusters or infiltrate patches per slide; for ridges the
    /// painted fraction of the lesion zone.
    pub blob_density: f64,
    pub blob_radius_px: u32,
    pub base_chroma: [f64; 3],
    pub arrangement: Arrangement,
}

pub fn recipe(class: ClassLabel) -> TextureRecipe {
    match class {
        ClassLabel::Basaloid => TextureRecipe {
            class,
            blob_density: 4.0,
            blob_radius_px: 70,
            base_chroma: [88.0, 58.0, 148.0],
            arrangement: Arrangement::DenseIslands,
        },
        ClassLabel::Squamous => TextureRecipe {
            class,
            blob_density: 0.45,
            blob_radius_px: 180,
            base_chroma: [196.0, 96.0, 150.0],
            arrangement: Arrangement::Ridges,
        },
        ClassLabel::Melanocytic => TextureRecipe {
            class,
            blob_density: 4.0,
            blob_radius_px: 14,
            base_chroma: [146.0, 92.0, 78.0],
            arrangement: Arrangement::NestedClusters,
        },
        ClassLabel::Other => TextureRecipe {
            class,
            blob_density: 3.0,
            blob_radius_px: 4,
            base_chroma: [112.0, 84.0, 172.0],
            arrangement: Arrangement::SparseBackground,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlideGeometry {
    pub height: usize,
    pub width: usize,
}

impl Default for SlideGeometry {
    fn default() -> Self {
        Self {
            height: 1024,
            width: 1536,
        }
    }
}

impl SlideGeometry {
    fn scale(&self) -> f64 {
        (self.height as f64 / 1024.0).min(self.width as f64 / 1536.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSlide {
    pub raster: RgbImage,
    pub roi_mask: Mask,
    /// Ground-truth tissue region (before artifacts).
    pub tissue_region: Mask,
    pub record: SlideRecord,
}

/// Reference-appearance rendering of a slide, before the lab profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRender {
    pub raster: RgbImage,
    pub roi_mask: Mask,
    pub tissue_region: Mask,
    pub no_pathology: bool,
}

#[inline]
fn hash01(seed: u64, r: usize, c: usize) -> f64 {
    let mut z = seed ^ ((r as u64) << 32 | c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Star-shaped region in coordinates normalized by the half extents.
struct StarShape {
    cy: f64,
    cx: f64,
    half_h: f64,
    half_w: f64,
    radius: f64,
    harmonics: [(f64, f64, f64); 3],
}

impl StarShape {
    fn random(rng: &mut ChaCha8Rng, geom: SlideGeometry) -> Self {
        let half_h = geom.height as f64 / 2.0;
        let half_w = geom.width as f64 / 2.0;
        let cy = half_h * (1.0 + rng.gen_range(-0.03..0.03));
        let cx = half_w * (1.0 + rng.gen_range(-0.03..0.03));
        let harmonics = [2.0, 3.0, 5.0].map(|k| (k, rng.gen_range(0.0..0.06), rng.gen_range(0.0..2.0 * PI)));
        let target = rng.gen_range(0.22..0.55);
        // fraction of the raster = R^2/8 * integral of g(theta)^2
        let steps = 720;
        let (mut integral, mut gmax) = (0.0, 0.0f64);
        for i in 0..steps {
            let th = 2.0 * PI * i as f64 / steps as f64;
            let g = Self::profile(&harmonics, th);
            integral += g * g * 2.0 * PI / steps as f64;
            gmax = gmax.max(g);
        }
        let radius = (8.0 * target / integral).sqrt().min(0.92 / gmax);
        Self {
            cy,
            cx,
            half_h,
            half_w,
            radius,
            harmonics,
        }
    }

    fn profile(harmonics: &[(f64, f64, f64); 3], th: f64) -> f64 {
        1.0 + harmonics.iter().map(|(k, a, ph)| a * (k * th + ph).cos()).sum::<f64>()
    }

    /// Normalized radial position: < 1 inside.
    fn rel(&self, r: f64, c: f64) -> f64 {
        let u = (r - self.cy) / self.half_h;
        let v = (c - self.cx) / self.half_w;
        let rho = (u * u + v * v).sqrt();
        rho / (self.radius * Self::profile(&self.harmonics, u.atan2(v)))
    }

    /// Inside test for the unit contour. Points well inside the smallest or
    /// beyond the largest radius skip the angular profile.
    fn contains(&self, r: f64, c: f64) -> bool {
        let u = (r - self.cy) / self.half_h;
        let v = (c - self.cx) / self.half_w;
        let rho2 = u * u + v * v;
        let amp: f64 = self.harmonics.iter().map(|h| h.1).sum();
        let lo = self.radius * (1.0 - amp) * (1.0 - 1e-9);
        let hi = self.radius * (1.0 + amp) * (1.0 + 1e-9);
        if rho2 < lo * lo {
            true
        } else if rho2 > hi * hi {
            false
        } else {
            self.rel(r, c) <= 1.0
        }
    }

    fn sample_inside(&self, rng: &mut ChaCha8Rng, depth: f64) -> (f64, f64) {
        loop {
            let r = rng.gen_range(0.0..2.0 * self.half_h);
            let c = rng.gen_range(0.0..2.0 * self.half_w);
            if self.rel(r, c) <= depth {
                return (r, c);
            }
        }
    }
}

/// Low-frequency value noise in [-1, 1].
struct ValueNoise {
    cell: usize,
    cols: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, geom: SlideGeometry, cell: usize) -> Self {
        let rows = geom.height / cell + 2;
        let cols = geom.width / cell + 2;
        let grid = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { cell, cols, grid }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        let (gr, gc) = (r / self.cell, c / self.cell);
        let fy = (r % self.cell) as f64 / self.cell as f64;
        let fx = (c % self.cell) as f64 / self.cell as f64;
        let g = |y: usize, x: usize| self.grid[y * self.cols + x];
        let top = g(gr, gc) * (1.0 - fx) + g(gr, gc + 1) * fx;
        let bottom = g(gr + 1, gc) * (1.0 - fx) + g(gr + 1, gc + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

struct Canvas {
    geom: SlideGeometry,
    color: Vec<[f64; 3]>,
    tissue: Vec<bool>,
    roi: Vec<bool>,
    chroma: [f64; 3],
    strength: f64,
    speckle_seed: u64,
}

impl Canvas {
    fn paint(&mut self, r: usize, c: usize) {
        let i = r * self.geom.width + c;
        if !self.tissue[i] || self.roi[i] {
            return;
        }
        self.roi[i] = true;
        let dark = if hash01(self.speckle_seed, r, c) > 0.78 { 34.0 } else { 0.0 };
        let base = self.color[i];
        self.color[i] = [0, 1, 2].map(|k| {
            let lesion = self.chroma[k] - dark;
            base[k] * (1.0 - self.strength) + lesion * self.strength
        });
    }

    fn paint_disk(&mut self, cy: f64, cx: f64, radius: f64, wobble: Option<[(f64, f64, f64); 3]>) {
        let reach = radius * 1.25;
        let r0 = (cy - reach).floor().max(0.0) as usize;
        let r1 = ((cy + reach).ceil() as usize).min(self.geom.height.saturating_sub(1));
        let c0 = (cx - reach).floor().max(0.0) as usize;
        let c1 = ((cx + reach).ceil() as usize).min(self.geom.width.saturating_sub(1));
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dy = r as f64 - cy;
                let dx = c as f64 - cx;
                let limit = match &wobble {
                    Some(h) => radius * StarShape::profile(h, dy.atan2(dx)),
                    None => radius,
                };
                if dy * dy + dx * dx <= limit * limit {
                    self.paint(r, c);
                }
            }
        }
    }
}

/// Renders the reference-appearance slide for `class` from `rng`.
pub fn render_reference(
    class: ClassLabel,
    rng: &mut ChaCha8Rng,
    geom: SlideGeometry,
    no_pathology_rate: f64,
) -> ReferenceRender {
    let rec = recipe(class);
    let scale = geom.scale();
    let bg = rng.gen_range(230.0..=240.0);
    let shape = StarShape::random(rng, geom);
    let fibers = ValueNoise::new(rng, geom, 32);
    let stroma_jitter = [0, 1, 2].map(|_| rng.gen_range(-6.0..6.0));
    let hash_seed: u64 = rng.gen();
    let no_pathology = class == ClassLabel::Other && rng.gen::<f64>() < no_pathology_rate;
    let strength = rng.gen_range(0.5..1.0);

    let n = geom.height * geom.width;
    let mut color = Vec::with_capacity(n);
    let mut tissue = Vec::with_capacity(n);
    for r in 0..geom.height {
        for c in 0..geom.width {
            let inside = shape.contains(r as f64, c as f64);
            tissue.push(inside);
            if inside {
                let f = 9.0 * fibers.at(r, c) + 6.0 * (hash01(hash_seed, r, c) - 0.5);
                color.push([0, 1, 2].map(|k| STROMA[k] + stroma_jitter[k] + f));
            } else {
                let j = 4.0 * (hash01(hash_seed ^ 1, r, c) - 0.5);
                color.push([bg + j; 3]);
            }
        }
    }

    let mut canvas = Canvas {
        geom,
        color,
        tissue,
        roi: vec![false; n],
        chroma: rec.base_chroma,
        strength,
        speckle_seed: hash_seed ^ 2,
    };

    if !no_pathology {
        let base_radius = f64::from(rec.blob_radius_px) * scale;
        match rec.arrangement {
            Arrangement::DenseIslands => {
                let count = rng.gen_range(rec.blob_density as usize - 1..=rec.blob_density as usize + 1);
                for _ in 0..count {
                    let (cy, cx) = shape.sample_inside(rng, 0.8);
                    let radius = base_radius * rng.gen_range(0.7..1.3);
                    let wobble = [2.0, 3.0, 4.0].map(|k| (k, rng.gen_range(0.0..0.15), rng.gen_range(0.0..2.0 * PI)));
                    canvas.paint_disk(cy, cx, radius, Some(wobble));
                }
            }
            Arrangement::Ridges => {
                let (cy, cx) = shape.sample_inside(rng, 0.5);
                let zone = base_radius * rng.gen_range(0.8..1.2);
                let phi: f64 = rng.gen_range(0.0..PI);
                let period = rng.gen_range(18.0..26.0) * scale.max(0.25);
                let cut = (PI * (0.5 - rec.blob_density)).sin();
                let (sin_phi, cos_phi) = phi.sin_cos();
                let r0 = (cy - zone).max(0.0) as usize;
                let r1 = ((cy + zone) as usize).min(geom.height - 1);
                let c0 = (cx - zone * 1.3).max(0.0) as usize;
                let c1 = ((cx + zone * 1.3) as usize).min(geom.width - 1);
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        let dy = (r as f64 - cy) / zone;
                        let dx = (c as f64 - cx) / (zone * 1.3);
                        if dy * dy + dx * dx > 1.0 {
                            continue;
                        }
                        let t = (c as f64 * cos_phi + r as f64 * sin_phi) / period + 0.8 * (r as f64 / 37.0).sin();
                        if (2.0 * PI * t).sin() > cut {
                            canvas.paint(r, c);
                        }
                    }
                }
            }
            Arrangement::NestedClusters => {
                let clusters = rng.gen_range(rec.blob_density as usize - 1..=rec.blob_density as usize + 1);
                for _ in 0..clusters {
                    let (cy, cx) = shape.sample_inside(rng, 0.75);
                    let nests = rng.gen_range(6..=12);
                    for _ in 0..nests {
                        let a = rng.gen_range(0.0..2.0 * PI);
                        let d = rng.gen_range(0.0..70.0) * scale;
                        let radius = base_radius * rng.gen_range(0.7..1.4);
                        canvas.paint_disk(cy + d * a.sin(), cx + d * a.cos(), radius, None);
                    }
                }
            }
            Arrangement::SparseBackground => {
                let patches = rng.gen_range(rec.blob_density as usize - 1..=rec.blob_density as usize + 1);
                for _ in 0..patches {
                    let (cy, cx) = shape.sample_inside(rng, 0.8);
                    let patch = 60.0 * scale * rng.gen_range(0.8..1.2);
                    let cells = (PI * patch * patch * 0.006 / scale.max(0.25)) as usize;
                    for _ in 0..cells {
                        let a = rng.gen_range(0.0..2.0 * PI);
                        let d = patch * rng.gen::<f64>().sqrt();
                        let radius = base_radius * rng.gen_range(0.75..1.25);
                        canvas.paint_disk(cy + d * a.sin(), cx + d * a.cos(), radius, None);
                    }
                }
                let scattered = (120.0 * scale * scale) as usize;
                for _ in 0..scattered {
                    let (cy, cx) = shape.sample_inside(rng, 0.95);
                    canvas.paint_disk(cy, cx, base_radius, None);
                }
            }
        }
    }

    let mut raster = RgbImage::new(geom.width, geom.height);
    for (px, col) in raster.as_raw_mut().chunks_exact_mut(3).zip(&canvas.color) {
        for k in 0..3 {
            px[k] = col[k].round().clamp(0.0, 255.0) as u8;
        }
    }
    ReferenceRender {
        raster,
        roi_mask: Mask::from_vec(geom.width, geom.height, canvas.roi).expect("shape"),
        tissue_region: Mask::from_vec(geom.width, geom.height, canvas.tissue).expect("shape"),
        no_pathology,
    }
}

/// `clamp(M p + offset + noise)` for every pixel.
pub fn apply_profile(reference: &RgbImage, profile: &LabProfile, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut out = reference.clone();
    let sigma = profile.noise_sigma;
    for px in out.as_raw_mut().chunks_exact_mut(3) {
        let q = profile.apply([f64::from(px[0]), f64::from(px[1]), f64::from(px[2])]);
        for k in 0..3 {
            let noise = if sigma > 0.0 {
                sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            px[k] = (q[k] + noise).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Where an artifact was placed.
#[derive(Debug, Clone, PartialEq)]
pub enum ArtifactRegion {
    Stroke {
        vertices: Vec<(f64, f64)>,
        thickness: f64,
        color: [u8; 3],
    },
    Patch {
        row: usize,
        col: usize,
        size: usize,
    },
    Circle {
        cy: f64,
        cx: f64,
        radius: f64,
    },
    Whole,
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vy, vx) = (b.0 - a.0, b.1 - a.1);
    let (wy, wx) = (p.0 - a.0, p.1 - a.1);
    let len2 = vy * vy + vx * vx;
    let t = if len2 > 0.0 {
        ((wy * vy + wx * vx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dy, dx) = (wy - t * vy, wx - t * vx);
    (dy * dy + dx * dx).sqrt()
}

/// Applies a localized, deterministic artifact in place.
pub fn inject_artifact(raster: &mut RgbImage, kind: ArtifactKind, seed: u64) -> ArtifactRegion {
    let mut rng = rng_for(seed, kind.as_str());
    let (h, w) = (raster.height(), raster.width());
    let (hf, wf) = (h as f64, w as f64);
    match kind {
        ArtifactKind::PenInk => {
            let color = if rng.gen::<bool>() { [25, 45, 165] } else { [20, 125, 50] };
            let thickness = rng.gen_range(10.0..16.0) * (hf / 1024.0).max(0.25);
            let vertices = vec![
                (rng.gen_range(0.1..0.9) * hf, rng.gen_range(0.0..0.15) * wf),
                (rng.gen_range(0.35..0.65) * hf, rng.gen_range(0.3..0.45) * wf),
                (rng.gen_range(0.35..0.65) * hf, rng.gen_range(0.55..0.7) * wf),
                (rng.gen_range(0.1..0.9) * hf, rng.gen_range(0.85..1.0) * wf),
            ];
            let half = thickness / 2.0;
            for seg in vertices.windows(2) {
                let (a, b) = (seg[0], seg[1]);
                let r0 = (a.0.min(b.0) - half).floor().max(0.0) as usize;
                let r1 = ((a.0.max(b.0) + half).ceil() as usize).min(h.saturating_sub(1));
                let c0 = (a.1.min(b.1) - half).floor().max(0.0) as usize;
                let c1 = ((a.1.max(b.1) + half).ceil() as usize).min(w.saturating_sub(1));
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        if segment_distance((r as f64, c as f64), a, b) <= half {
                            raster.put(r, c, color);
                        }
                    }
                }
            }
            ArtifactRegion::Stroke {
                vertices,
                thickness,
                color,
            }
        }
        ArtifactKind::BlurPatch => {
            let size = ((rng.gen_range(0.19..0.31) * hf) as usize).clamp(1, h.min(w));
            let row = (rng.gen_range(0.3..0.7) * hf) as usize;
            let col = (rng.gen_range(0.3..0.7) * wf) as usize;
            let row = row.saturating_sub(size / 2).min(h - size);
            let col = col.saturating_sub(size / 2).min(w - size);
            box_blur_region(raster, row, col, size, 6);
            ArtifactRegion::Patch { row, col, size }
        }
        ArtifactKind::Bubble => {
            let radius = rng.gen_range(0.09..0.18) * hf;
            let cy = rng.gen_range(0.3..0.7) * hf;
            let cx = rng.gen_range(0.3..0.7) * wf;
            let r0 = (cy - radius).floor().max(0.0) as usize;
            let r1 = ((cy + radius).ceil() as usize).min(h.saturating_sub(1));
            let c0 = (cx - radius).floor().max(0.0) as usize;
            let c1 = ((cx + radius).ceil() as usize).min(w.saturating_sub(1));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                    if dy * dy + dx * dx <= radius * radius {
                        let p = raster.get(r, c);
                        raster.put(r, c, p.map(|v| (f64::from(v) + (255.0 - f64::from(v)) * 0.45).round() as u8));
                    }
                }
            }
            ArtifactRegion::Circle { cy, cx, radius }
        }
        ArtifactKind::Blank => {
            raster
                .as_raw_mut()
                .iter_mut()
                .for_each(|v| *v = BACKGROUND_LEVEL);
            ArtifactRegion::Whole
        }
    }
}

/// Separable box blur of the `size`x`size` window, reading the original pixels.
fn box_blur_region(raster: &mut RgbImage, row: usize, col: usize, size: usize, radius: usize) {
    let src = raster.crop(row, col, size, size);
    let mut tmp = vec![[0.0f64; 3]; size * size];
    for r in 0..size {
        for c in 0..size {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(size - 1);
            let mut acc = [0.0; 3];
            for k in lo..=hi {
                let p = src.get(r, k);
                for ch in 0..3 {
                    acc[ch] += f64::from(p[ch]);
                }
            }
            let n = (hi - lo + 1) as f64;
            tmp[r * size + c] = acc.map(|a| a / n);
        }
    }
    for r in 0..size {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(size - 1);
        for c in 0..size {
            let mut acc = [0.0; 3];
            for k in lo..=hi {
                for ch in 0..3 {
                    acc[ch] += tmp[k * size + c][ch];
                }
            }
            let n = (hi - lo + 1) as f64;
            raster.put(row + r, col + c, acc.map(|a| (a / n).round() as u8));
        }
    }
}

const NO_PATHOLOGY_RATE: f64 = 0.15;

fn render_slide(
    record: SlideRecord,
    profile: &LabProfile,
    slide_seed: u64,
    geom: SlideGeometry,
) -> SynthSlide {
    let mut rng = rng_for(slide_seed, "reference");
    let reference = render_reference(record.truth, &mut rng, geom, NO_PATHOLOGY_RATE);
    let mut noise_rng = rng_for(slide_seed, "noise");
    let mut raster = apply_profile(&reference.raster, profile, &mut noise_rng);
    let mut roi_mask = reference.roi_mask;
    let mut tissue_region = reference.tissue_region;
    let mut draw = rng_for(slide_seed, "artifacts");
    for kind in ArtifactKind::ALL {
        let u: f64 = draw.gen();
        if u < profile.artifact_rates.rate(kind) {
            inject_artifact(&mut raster, kind, derive_seed(slide_seed, kind.as_str()));
            if kind == ArtifactKind::Blank {
                roi_mask.clear();
                tissue_region.clear();
            }
        }
    }
    SynthSlide {
        raster,
        roi_mask,
        tissue_region,
        record,
    }
}

/// One standalone slide of `class` in `profile`'s appearance.
pub fn generate_slide(class: ClassLabel, profile: &LabProfile, seed: u64) -> SynthSlide {
    generate_slide_with(class, profile, seed, SlideGeometry::default())
}

pub fn generate_slide_with(class: ClassLabel, profile: &LabProfile, seed: u64, geom: SlideGeometry) -> SynthSlide {
    let slide_id = format!("{}-x{seed:016x}", profile.lab_id);
    let record = SlideRecord {
        raster_path: PathBuf::from(format!("rasters/{slide_id}.ppm")),
        specimen_id: slide_id.clone(),
        slide_id,
        lab_id: profile.lab_id.clone(),
        truth: class,
    };
    render_slide(record, profile, seed, geom)
}

/// Mask file stored next to a raster.
pub fn mask_path_for(raster_path: &Path) -> PathBuf {
    raster_path.with_extension("pgm")
}

/// A generated corpus: its manifest plus everything needed to re-render any
/// slide bit-identically on demand.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: DatasetManifest,
    pub labs: Vec<LabProfile>,
    pub seed: u64,
    pub geometry: SlideGeometry,
}

pub fn generate_corpus(
    n_specimens_per_lab: usize,
    labs: &[LabProfile],
    slides_per_specimen: RangeInclusive<u32>,
    seed: u64,
) -> Result<SynthCorpus> {
    generate_corpus_with(n_specimens_per_lab, labs, slides_per_specimen, seed, SlideGeometry::default())
}

pub fn generate_corpus_with(
    n_specimens_per_lab: usize,
    labs: &[LabProfile],
    slides_per_specimen: RangeInclusive<u32>,
    seed: u64,
    geometry: SlideGeometry,
) -> Result<SynthCorpus> {
    if labs.is_empty() {
        return Err(Error::invalid("at least one lab profile is required"));
    }
    if n_specimens_per_lab == 0 {
        return Err(Error::invalid("at least one specimen per lab is required"));
    }
    if *slides_per_specimen.start() == 0 || slides_per_specimen.is_empty() {
        return Err(Error::invalid("slides per specimen must be a non-empty range starting at 1 or more"));
    }
    if geometry.height < 128 || geometry.width < 128 {
        return Err(Error::invalid("slide geometry must be at least 128x128"));
    }
    let mut records = Vec::new();
    for lab in labs {
        // balanced by construction, order shuffled
        let mut classes: Vec<ClassLabel> = (0..n_specimens_per_lab).map(|i| ClassLabel::ALL[i % 4]).collect();
        classes.shuffle(&mut rng_for(seed, &format!("classes/{}", lab.lab_id)));
        for (i, truth) in classes.into_iter().enumerate() {
            let specimen_id = format!("{}-s{i:04}", lab.lab_id);
            let n_slides = rng_for(seed, &specimen_id).gen_range(slides_per_specimen.clone());
            for w in 0..n_slides {
                let slide_id = format!("{specimen_id}-w{w}");
                records.push(SlideRecord {
                    raster_path: PathBuf::from(format!("rasters/{slide_id}.ppm")),
                    slide_id,
                    specimen_id: specimen_id.clone(),
                    lab_id: lab.lab_id.clone(),
                    truth,
                });
            }
        }
    }
    Ok(SynthCorpus {
        manifest: DatasetManifest::new(records)?,
        labs: labs.to_vec(),
        seed,
        geometry,
    })
}

impl SynthCorpus {
    pub fn profile(&self, lab_id: &str) -> Option<&LabProfile> {
        self.labs.iter().find(|l| l.lab_id == lab_id)
    }

    pub fn slide_seed(&self, slide_id: &str) -> u64 {
        derive_seed(self.seed, slide_id)
    }

    pub fn render(&self, record: &SlideRecord) -> Result<SynthSlide> {
        let profile = self
            .profile(&record.lab_id)
            .ok_or_else(|| Error::invalid(format!("no lab profile for `{}`", record.lab_id)))?;
        Ok(render_slide(record.clone(), profile, self.slide_seed(&record.slide_id), self.geometry))
    }

    pub fn render_id(&self, slide_id: &str) -> Result<SynthSlide> {
        let record = self
            .manifest
            .record(slide_id)
            .ok_or_else(|| Error::invalid(format!("unknown slide `{slide_id}`")))?;
        self.render(record)
    }

    /// Writes rasters (PPM), ROI masks (PGM) and `manifest.txt` under `dir`.
    pub fn store(&self, dir: &Path, workers: usize) -> Result<PathBuf> {
        let rasters = dir.join("rasters");
        fs::create_dir_all(&rasters).map_err(|e| Error::io(&rasters, e))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
        pool.install(|| {
            self.manifest.records().par_iter().try_for_each(|record| {
                let slide = self.render(record)?;
                let path = dir.join(&record.raster_path);
                write_ppm(&path, &slide.raster)?;
                write_pgm(&mask_path_for(&path), &slide.roi_mask)
            })
        })?;
        let manifest_path = dir.join("manifest.txt");
        save_manifest(&self.manifest, &manifest_path)?;
        Ok(manifest_path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{segment_tissue, TilingParams};

    const SMALL: SlideGeometry = SlideGeometry {
        height: 256,
        width: 384,
    };

    #[test]
    fn singular_profile_rejected() {
        let m = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]];
        assert!(LabProfile::new("x", m, [0.0; 3], 1.0, ArtifactRates::default()).is_err());
    }

    #[test]
    fn profile_inverse_recovers_input() {
        for lab in default_labs() {
            let p = [120.0, 77.0, 201.0];
            let back = lab.invert(lab.apply(p));
            for k in 0..3 {
                assert!((back[k] - p[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stain_shift_keeps_glass_neutral() {
        let params = TilingParams::default();
        for lab in default_labs() {
            let g = lab.apply([235.0; 3]).map(|v| v.round() as u8);
            assert!(!crate::tiling::is_tissue(g, &params), "{}: {g:?}", lab.lab_id);
        }
    }

    #[test]
    fn one_recipe_per_class() {
        let arrangements: Vec<_> = ClassLabel::ALL.iter().map(|c| recipe(*c).arrangement).collect();
        for (i, a) in arrangements.iter().enumerate() {
            assert_eq!(recipe(ClassLabel::ALL[i]).class, ClassLabel::ALL[i]);
            assert_eq!(arrangements.iter().filter(|b| *b == a).count(), 1);
        }
    }

    #[test]
    fn eight_specimens_are_balanced() {
        let corpus = generate_corpus(8, &[LabProfile::identity("ref")], 1..=1, 3).unwrap();
        assert_eq!(corpus.manifest.len(), 8);
        for class in ClassLabel::ALL {
            let n = corpus.manifest.records().iter().filter(|r| r.truth == class).count();
            assert_eq!(n, 2, "{class}");
        }
    }

    #[test]
    fn corpus_rejects_zero_labs() {
        assert!(matches!(generate_corpus(4, &[], 1..=2, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn specimens_share_truth_across_slides() {
        let corpus = generate_corpus(12, &default_labs(), 1..=3, 9).unwrap();
        let truths = corpus.manifest.specimen_truths();
        for r in corpus.manifest.records() {
            assert_eq!(truths[&r.specimen_id], r.truth);
        }
        assert!(corpus.manifest.records().len() > 12 * 4);
    }

    #[test]
    fn generation_is_bit_deterministic_and_order_free() {
        let corpus = generate_corpus_with(4, &default_labs(), 1..=2, 11, SMALL).unwrap();
        let ids: Vec<String> = corpus.manifest.records().iter().map(|r| r.slide_id.clone()).collect();
        let forward: Vec<_> = ids.iter().map(|id| corpus.render_id(id).unwrap()).collect();
        for id in ids.iter().rev() {
            let again = corpus.render_id(id).unwrap();
            let i = ids.iter().position(|x| x == id).unwrap();
            assert_eq!(again, forward[i]);
        }
    }

    #[test]
    fn identity_profile_reproduces_reference_means() {
        let geom = SlideGeometry::default();
        for class in ClassLabel::ALL {
            let slide = generate_slide_with(class, &LabProfile::identity("id"), 42, geom);
            let mut rng = rng_for(42, "reference");
            let reference = render_reference(class, &mut rng, geom, NO_PATHOLOGY_RATE);
            // independent mean pass over raw bytes
            let mut sums = [0u64; 3];
            for (i, v) in reference.raster.as_raw().iter().enumerate() {
                sums[i % 3] += u64::from(*v);
            }
            let n = (geom.width * geom.height) as f64;
            let means = slide.raster.channel_means();
            for k in 0..3 {
                assert!((means[k] - sums[k] as f64 / n).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn melanocytic_has_nests_and_bounded_roi_fraction() {
        let slide = generate_slide(ClassLabel::Melanocytic, &LabProfile::identity("id"), 5);
        let frac = slide.roi_mask.fraction();
        assert!(frac > 0.002 && frac < 0.15, "roi fraction {frac}");
        // every lesion pixel lies inside tissue
        for (roi, tissue) in slide.roi_mask.as_slice().iter().zip(slide.tissue_region.as_slice()) {
            assert!(!roi || *tissue);
        }
        let tissue = slide.tissue_region.fraction();
        assert!((0.18..=0.62).contains(&tissue), "tissue fraction {tissue}");
    }

    #[test]
    fn lesion_slides_have_roi() {
        for class in [ClassLabel::Basaloid, ClassLabel::Squamous, ClassLabel::Melanocytic] {
            for seed in 0..3 {
                let s = generate_slide_with(class, &LabProfile::identity("id"), seed, SMALL);
                assert!(s.roi_mask.count() > 0, "{class} seed {seed}");
            }
        }
    }

    #[test]
    fn blank_rate_one_gives_background_only() {
        let mut profile = LabProfile::identity("blank");
        profile.artifact_rates.blank = 1.0;
        let slide = generate_slide_with(ClassLabel::Basaloid, &profile, 1, SMALL);
        assert!(slide.raster.as_raw().iter().all(|&v| v == BACKGROUND_LEVEL));
        assert_eq!(slide.roi_mask.count(), 0);
    }

    #[test]
    fn pen_ink_rate_one_draws_saturated_stroke_over_tissue() {
        let mut profile = LabProfile::identity("ink");
        profile.artifact_rates.pen_ink = 1.0;
        let slide = generate_slide(ClassLabel::Squamous, &profile, 8);
        let inked = slide
            .raster
            .pixels()
            .zip(slide.tissue_region.as_slice())
            .filter(|(p, t)| **t && (*p == [25, 45, 165] || *p == [20, 125, 50]))
            .count();
        assert!(inked > 100, "{inked}");
    }

    #[test]
    fn blur_patch_lowers_variance() {
        let slide = generate_slide_with(ClassLabel::Basaloid, &default_labs()[0], 4, SlideGeometry::default());
        let mut raster = slide.raster.clone();
        let region = inject_artifact(&mut raster, ArtifactKind::BlurPatch, 17);
        let ArtifactRegion::Patch { row, col, size } = region else {
            panic!("expected patch")
        };
        let var = |img: &RgbImage| {
            let vals: Vec<f64> = img.crop(row, col, size, size).as_raw().iter().map(|&v| f64::from(v)).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64
        };
        assert!(var(&raster) < var(&slide.raster));
    }

    #[test]
    fn bubble_lightens_inside_circle() {
        let slide = generate_slide(ClassLabel::Other, &default_labs()[1], 2);
        let mut raster = slide.raster.clone();
        let ArtifactRegion::Circle { cy, cx, radius } = inject_artifact(&mut raster, ArtifactKind::Bubble, 23) else {
            panic!("expected circle")
        };
        let (mut before, mut after, mut n) = (0.0, 0.0, 0.0);
        for r in 0..raster.height() {
            for c in 0..raster.width() {
                let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                if dy * dy + dx * dx <= radius * radius {
                    before += slide.raster.get(r, c).iter().map(|&v| f64::from(v)).sum::<f64>();
                    after += raster.get(r, c).iter().map(|&v| f64::from(v)).sum::<f64>();
                    n += 3.0;
                }
            }
        }
        assert!(after / n > before / n + 1.0);
        // expected lift is 0.45 of the headroom
        let expected = 0.45 * (255.0 - before / n);
        assert!((after / n - before / n - expected).abs() < 1.0);
    }

    #[test]
    fn blank_artifact_fills_background() {
        let mut img = RgbImage::filled(10, 10, [1, 2, 3]);
        assert_eq!(inject_artifact(&mut img, ArtifactKind::Blank, 0), ArtifactRegion::Whole);
        assert!(img.as_raw().iter().all(|&v| v == BACKGROUND_LEVEL));
        assert!("smudge".parse::<ArtifactKind>().is_err());
    }

    #[test]
    fn segmentation_matches_generated_tissue_region() {
        for (i, lab) in default_labs().iter().enumerate() {
            let mut clean = lab.clone();
            clean.artifact_rates = ArtifactRates::default();
            let slide = generate_slide(ClassLabel::ALL[i], &clean, 30 + i as u64);
            let mask = segment_tissue(&slide.raster, &TilingParams::default());
            let iou = mask.iou(&slide.tissue_region);
            assert!(iou >= 0.9, "{}: IoU {iou}", lab.lab_id);
        }
    }

    #[test]
    fn profile_then_inverse_recovers_reference_within_noise() {
        let lab = &default_labs()[2];
        let mut rng = rng_for(77, "reference");
        let reference = render_reference(ClassLabel::Squamous, &mut rng, SMALL, 0.0);
        let shifted = apply_profile(&reference.raster, lab, &mut rng_for(77, "noise"));
        // std amplification of i.i.d. channel noise through M^-1, per output channel
        let base = lab.invert([0.0; 3]);
        let cols: Vec<[f64; 3]> = (0..3)
            .map(|k| {
                let mut e = [0.0; 3];
                e[k] = 1.0;
                let v = lab.invert(e);
                [0, 1, 2].map(|c| v[c] - base[c])
            })
            .collect();
        let amp = [0, 1, 2].map(|c| cols.iter().map(|col| col[c] * col[c]).sum::<f64>().sqrt());
        let (mut within, mut total) = (0usize, 0usize);
        for (p, q) in reference.raster.pixels().zip(shifted.pixels()) {
            let back = lab.invert(q.map(f64::from));
            for k in 0..3 {
                total += 1;
                let tol = (3.0 * lab.noise_sigma + 0.5) * amp[k];
                if (back[k] - f64::from(p[k])).abs() <= tol {
                    within += 1;
                }
            }
        }
        assert!(within as f64 / total as f64 > 0.99);
    }
}
