//! Stain and appearance adaptation by color-statistics matching.
//!
//! Pixels are mapped to a decorrelated log-color space (an orthonormal
//! rotation of log RGB into one achromatic and two opponent axes). Each axis
//! is standardized with the source domain's statistics and rescaled to the
//! target domain's, then mapped back to RGB.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::tiling::Tile;

pub const STD_FLOOR: f64 = 1e-6;

const STATS_HEADER: &str = "wsi-triage-stats v1";
const ADAPTER_HEADER: &str = "wsi-triage-adapter v1";

const INV_SQRT3: f64 = 0.577_350_269_189_625_8;
const INV_SQRT6: f64 = 0.408_248_290_463_863;
const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Rows map (log R, log G, log B) to (l, alpha, beta).
const ROTATION: [[f64; 3]; 3] = [
    [INV_SQRT3, INV_SQRT3, INV_SQRT3],
    [INV_SQRT6, INV_SQRT6, -2.0 * INV_SQRT6],
    [INV_SQRT2, -INV_SQRT2, 0.0],
];

#[inline]
fn log_level(v: u8) -> f64 {
    ((f64::from(v) + 1.0) / 256.0).ln()
}

/// RGB -> decorrelated log-color coordinates.
pub fn to_decorrelated(p: [u8; 3]) -> [f64; 3] {
    let l = p.map(log_level);
    ROTATION.map(|row| row[0] * l[0] + row[1] * l[1] + row[2] * l[2])
}

/// Decorrelated log-color coordinates -> RGB, rounded and clamped.
pub fn from_decorrelated(q: [f64; 3]) -> [u8; 3] {
    [0, 1, 2].map(|c| {
        let log = ROTATION[0][c] * q[0] + ROTATION[1][c] * q[1] + ROTATION[2][c] * q[2];
        (log.exp() * 256.0 - 1.0).round().clamp(0.0, 255.0) as u8
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl DomainStats {
    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if mean.iter().chain(&std).any(|v| !v.is_finite()) {
            return Err(Error::invalid("domain statistics must be finite"));
        }
        Ok(Self {
            mean,
            std: std.map(|s| s.max(STD_FLOOR)),
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "{STATS_HEADER}\nmean {} {} {}\nstd {} {} {}\n",
            self.mean[0], self.mean[1], self.mean[2], self.std[0], self.std[1], self.std[2]
        )
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let values = parse_keyed_triples(text, name, STATS_HEADER, &["mean", "std"])?;
        DomainStats::new(values[0], values[1]).map_err(|e| Error::parse(name, 0, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

fn parse_keyed_triples(text: &str, name: &str, header: &str, keys: &[&str]) -> Result<Vec<[f64; 3]>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(Error::parse(name, 1, format!("expected header `{header}`"))),
    }
    let mut out = Vec::with_capacity(keys.len());
    for key in keys {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| Error::parse(name, 0, format!("missing `{key}` line")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(*key) {
            return Err(Error::parse(name, idx + 1, format!("expected `{key}`")));
        }
        let vals: Vec<f64> = parts
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(name, idx + 1, e.to_string()))?;
        if vals.len() != 3 {
            return Err(Error::parse(name, idx + 1, "expected three values"));
        }
        out.push([vals[0], vals[1], vals[2]]);
    }
    Ok(out)
}

/// Streaming mean/variance over tissue pixels (Welford).
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    count: u64,
    mean: [f64; 3],
    m2: [f64; 3],
}

impl StatsAccumulator {
    pub fn push(&mut self, p: [u8; 3]) {
        let q = to_decorrelated(p);
        self.count += 1;
        let n = self.count as f64;
        for c in 0..3 {
            let delta = q[c] - self.mean[c];
            self.mean[c] += delta / n;
            self.m2[c] += delta * (q[c] - self.mean[c]);
        }
    }

    pub fn push_tile(&mut self, tile: &Tile) {
        for (p, &t) in tile.pixels.pixels().zip(tile.tissue.as_slice()) {
            if t {
                self.push(p);
            }
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Combines two partial accumulations (pairwise update).
    pub fn merge(&mut self, other: &StatsAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for c in 0..3 {
            let delta = other.mean[c] - self.mean[c];
            self.mean[c] += delta * nb / n;
            self.m2[c] += other.m2[c] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<DomainStats> {
        if self.count == 0 {
            return Err(Error::invalid("no tissue pixels to fit domain statistics"));
        }
        let n = self.count as f64;
        DomainStats::new(self.mean, self.m2.map(|m| (m / n).sqrt()))
    }
}

fn fit(tiles: &[Tile]) -> Result<DomainStats> {
    if tiles.is_empty() {
        return Err(Error::invalid("cannot fit domain statistics on an empty tile sample"));
    }
    let mut acc = StatsAccumulator::default();
    tiles.iter().for_each(|t| acc.push_tile(t));
    acc.finish()
}

/// Target statistics from a reference-lab tile sample.
pub fn fit_reference(tiles: &[Tile]) -> Result<DomainStats> {
    fit(tiles)
}

/// Source statistics for a lab, fit on its calibration tiles.
pub fn fit_lab(tiles: &[Tile]) -> Result<DomainStats> {
    fit(tiles)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterModel {
    pub source: DomainStats,
    pub target: DomainStats,
}

/// Per-channel lookup tables for one adapter: the whole transform is
/// `exp(A log(rgb) + b)`, which factors into a product of 9 tables.
struct CompiledAdapter {
    scale: [f64; 3],
    tables: [[[f64; 256]; 3]; 3],
}

impl AdapterModel {
    pub fn new(source: DomainStats, target: DomainStats) -> Self {
        Self { source, target }
    }

    pub fn identity(stats: DomainStats) -> Self {
        Self::new(stats, stats)
    }

    pub fn is_identity(&self) -> bool {
        self.source == self.target
    }

    fn compile(&self) -> CompiledAdapter {
        let gain = [0, 1, 2].map(|k| self.target.std[k] / self.source.std[k]);
        let shift = [0, 1, 2].map(|k| self.target.mean[k] - gain[k] * self.source.mean[k]);
        // log_out = R^T (G R log_in + shift)
        let mut a = [[0.0; 3]; 3];
        let mut b = [0.0; 3];
        for c in 0..3 {
            for j in 0..3 {
                a[c][j] = (0..3).map(|k| ROTATION[k][c] * gain[k] * ROTATION[k][j]).sum();
            }
            b[c] = (0..3).map(|k| ROTATION[k][c] * shift[k]).sum();
        }
        let mut tables = [[[0.0; 256]; 3]; 3];
        for c in 0..3 {
            for j in 0..3 {
                for v in 0..256 {
                    tables[c][j][v] = (a[c][j] * log_level(v as u8)).exp();
                }
            }
        }
        CompiledAdapter {
            scale: b.map(|x| x.exp() * 256.0),
            tables,
        }
    }

    pub fn adapt_image(&self, img: &RgbImage) -> RgbImage {
        if self.is_identity() {
            return img.clone();
        }
        let compiled = self.compile();
        let mut out = img.clone();
        for px in out.as_raw_mut().chunks_exact_mut(3) {
            let (r, g, b) = (px[0] as usize, px[1] as usize, px[2] as usize);
            for c in 0..3 {
                let t = &compiled.tables[c];
                let v = compiled.scale[c] * t[0][r] * t[1][g] * t[2][b] - 1.0;
                px[c] = if v.is_finite() { v.round().clamp(0.0, 255.0) as u8 } else { 255 };
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let s = &self.source;
        let t = &self.target;
        format!(
            "{ADAPTER_HEADER}\nsource.mean {} {} {}\nsource.std {} {} {}\ntarget.mean {} {} {}\ntarget.std {} {} {}\n",
            s.mean[0], s.mean[1], s.mean[2], s.std[0], s.std[1], s.std[2],
            t.mean[0], t.mean[1], t.mean[2], t.std[0], t.std[1], t.std[2]
        )
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let v = parse_keyed_triples(
            text,
            name,
            ADAPTER_HEADER,
            &["source.mean", "source.std", "target.mean", "target.std"],
        )?;
        let wrap = |e: Error| Error::parse(name, 0, e.to_string());
        Ok(Self::new(
            DomainStats::new(v[0], v[1]).map_err(wrap)?,
            DomainStats::new(v[2], v[3]).map_err(wrap)?,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Appearance-standardized copy of `tile`; geometry and tissue mask unchanged.
pub fn adapt(tile: &Tile, model: &AdapterModel) -> Tile {
    Tile {
        slide_id: tile.slide_id.clone(),
        origin: tile.origin,
        pixels: model.adapt_image(&tile.pixels),
        tissue: tile.tissue.clone(),
        tissue_fraction: tile.tissue_fraction,
    }
}
