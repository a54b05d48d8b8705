//! Per-slide orchestration (segment, tile, adapt, ROI, classify, score),
//! parallel corpus runs with schedule-independent results, and stage timing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::adaptation::{adapt, AdapterModel};
use crate::aggregation::{aggregate, SlideOutcome, SlideResult, SpecimenResult};
use crate::classifier::{featurize, pool, FeatureVector, SlideEmbedding};
use crate::confidence::{mc_predict, score};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::{read_pgm, read_ppm, Mask, RgbImage};
use crate::manifest::SlideRecord;
use crate::models::ModelBundle;
use crate::roi::select;
use crate::synth::{mask_path_for, SynthCorpus};
use crate::tiling::{segment_tissue, tile, Tile};

/// Where slide rasters come from.
pub trait SlideSource: Sync {
    fn load(&self, record: &SlideRecord) -> Result<RgbImage>;

    /// Raster plus its ground-truth lesion mask, for segmenter training.
    fn load_annotated(&self, record: &SlideRecord) -> Result<(RgbImage, Mask)> {
        Err(Error::invalid(format!("no lesion annotation available for {}", record.slide_id)))
    }
}

/// Reads PPM rasters; relative paths resolve against `root`.
#[derive(Debug, Clone)]
pub struct FileSource {
    pub root: PathBuf,
}

impl FileSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl SlideSource for FileSource {
    fn load(&self, record: &SlideRecord) -> Result<RgbImage> {
        read_ppm(&self.root.join(&record.raster_path))
    }

    /// The mask is the `.pgm` sibling of the raster.
    fn load_annotated(&self, record: &SlideRecord) -> Result<(RgbImage, Mask)> {
        let path = self.root.join(&record.raster_path);
        Ok((read_ppm(&path)?, read_pgm(&mask_path_for(&path))?))
    }
}

/// Renders synthetic slides on demand instead of reading files.
impl SlideSource for SynthCorpus {
    fn load(&self, record: &SlideRecord) -> Result<RgbImage> {
        Ok(self.render(record)?.raster)
    }

    fn load_annotated(&self, record: &SlideRecord) -> Result<(RgbImage, Mask)> {
        let slide = self.render(record)?;
        Ok((slide.raster, slide.roi_mask))
    }
}

/// Milliseconds per stage for one slide.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTiming {
    pub segment_ms: f64,
    pub tile_ms: f64,
    pub adapt_ms: f64,
    pub roi_ms: f64,
    pub classify_ms: f64,
    pub score_ms: f64,
    /// Wall time of the whole slide, including raster loading.
    pub total_ms: f64,
}

pub const STAGE_NAMES: [&str; 7] = ["segment", "tile", "adapt", "roi", "classify", "score", "total"];

impl StageTiming {
    pub fn stages(&self) -> [f64; 6] {
        [self.segment_ms, self.tile_ms, self.adapt_ms, self.roi_ms, self.classify_ms, self.score_ms]
    }

    pub fn columns(&self) -> [f64; 7] {
        let s = self.stages();
        [s[0], s[1], s[2], s[3], s[4], s[5], self.total_ms]
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideRun {
    pub result: SlideResult,
    pub timing: StageTiming,
}

/// Tissue tiles of `raster`, adapted to the reference appearance when
/// adaptation is enabled.
pub fn prepared_tiles(raster: &RgbImage, slide_id: &str, adapter: &AdapterModel, cfg: &Config) -> Result<Vec<Tile>> {
    let mask = segment_tissue(raster, &cfg.tiling);
    let tiles = tile(slide_id, raster, &mask, &cfg.tiling)?;
    Ok(if cfg.adaptation_enabled {
        tiles.iter().map(|t| adapt(t, adapter)).collect()
    } else {
        tiles
    })
}

/// Features of the ROI-selected tiles; empty when no tile is selected.
pub fn roi_features(tiles: &[Tile], models: &ModelBundle, cfg: &Config) -> Result<Vec<FeatureVector>> {
    let maps: Vec<_> = tiles.iter().map(|t| models.segmenter.segment(t)).collect();
    let sel = select(tiles, &maps, cfg.roi_theta)?;
    Ok(sel.selected.iter().map(|&i| featurize(&tiles[i])).collect())
}

/// Mean-pooled ROI embedding of a raster, or `None` without ROI.
pub fn slide_embedding(raster: &RgbImage, slide_id: &str, models: &ModelBundle, cfg: &Config) -> Result<Option<SlideEmbedding>> {
    let tiles = prepared_tiles(raster, slide_id, &models.adapter(), cfg)?;
    let feats = roi_features(&tiles, models, cfg)?;
    Ok((!feats.is_empty()).then(|| pool(&feats)))
}

fn process(raster: &RgbImage, record: &SlideRecord, models: &ModelBundle, cfg: &Config, timing: &mut StageTiming) -> Result<SlideOutcome> {
    let t = Instant::now();
    let mask = segment_tissue(raster, &cfg.tiling);
    timing.segment_ms = ms(t.elapsed());

    let t = Instant::now();
    let tiles = tile(&record.slide_id, raster, &mask, &cfg.tiling)?;
    timing.tile_ms = ms(t.elapsed());

    let t = Instant::now();
    let tiles: Vec<Tile> = if cfg.adaptation_enabled {
        let adapter = models.adapter();
        tiles.iter().map(|x| adapt(x, &adapter)).collect()
    } else {
        tiles
    };
    timing.adapt_ms = ms(t.elapsed());

    let t = Instant::now();
    let maps: Vec<_> = tiles.iter().map(|x| models.segmenter.segment(x)).collect();
    let selection = select(&tiles, &maps, cfg.roi_theta)?;
    timing.roi_ms = ms(t.elapsed());
    if selection.is_empty() {
        return Ok(SlideOutcome::NoRoi);
    }

    let t = Instant::now();
    let feats: Vec<FeatureVector> = selection.selected.iter().map(|&i| featurize(&tiles[i])).collect();
    let matrix = mc_predict(&pool(&feats), &models.classifier, cfg.mc_t, cfg.keep_prob, cfg.seed, &record.slide_id)?;
    timing.classify_ms = ms(t.elapsed());

    let t = Instant::now();
    let s = score(&matrix);
    timing.score_ms = ms(t.elapsed());
    Ok(SlideOutcome::Classified {
        class: s.class,
        score: s.value,
        matrix,
    })
}

/// Runs one slide. Load or processing failures become a `Failed` outcome
/// rather than an error so a corpus run never aborts on one slide.
pub fn run_slide(record: &SlideRecord, source: &dyn SlideSource, models: &ModelBundle, cfg: &Config) -> SlideRun {
    let start = Instant::now();
    let mut timing = StageTiming::default();
    let outcome = source
        .load(record)
        .and_then(|raster| process(&raster, record, models, cfg, &mut timing))
        .unwrap_or_else(|e| SlideOutcome::Failed { error: e.to_string() });
    timing.total_ms = ms(start.elapsed());
    SlideRun {
        result: SlideResult {
            slide_id: record.slide_id.clone(),
            specimen_id: record.specimen_id.clone(),
            outcome,
        },
        timing,
    }
}

#[derive(Debug, Clone)]
pub struct CorpusRun {
    /// Ordered by slide id.
    pub slides: Vec<SlideRun>,
    /// Ordered by specimen id.
    pub specimens: Vec<SpecimenResult>,
    pub wall: Duration,
    pub workers: usize,
}

impl CorpusRun {
    pub fn throughput_per_second(&self) -> f64 {
        let secs = self.wall.as_secs_f64();
        if self.slides.is_empty() || secs == 0.0 {
            0.0
        } else {
            self.slides.len() as f64 / secs
        }
    }
}

pub fn aggregate_specimens(slides: &[SlideResult]) -> Result<Vec<SpecimenResult>> {
    let mut groups: BTreeMap<&str, Vec<SlideResult>> = BTreeMap::new();
    for s in slides {
        groups.entry(s.specimen_id.as_str()).or_default().push(s.clone());
    }
    groups.values().map(|g| aggregate(g)).collect()
}

/// Processes `records` on a pool of `workers` threads. Results are a pure
/// function of the inputs: per-slide streams are keyed by slide id and
/// output order is by slide id.
pub fn run_corpus(records: &[SlideRecord], source: &dyn SlideSource, models: &ModelBundle, cfg: &Config, workers: usize) -> Result<CorpusRun> {
    if workers == 0 {
        return Err(Error::invalid("workers must be at least 1"));
    }
    let mut ordered: Vec<&SlideRecord> = records.iter().collect();
    ordered.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    if ordered.windows(2).any(|w| w[0].slide_id == w[1].slide_id) {
        return Err(Error::invalid("duplicate slide id in run input"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let start = Instant::now();
    let slides: Vec<SlideRun> = pool.install(|| {
        ordered
            .par_iter()
            .with_max_len(1)
            .map(|r| run_slide(r, source, models, cfg))
            .collect()
    });
    let wall = start.elapsed();
    let results: Vec<SlideResult> = slides.iter().map(|s| s.result.clone()).collect();
    Ok(CorpusRun {
        specimens: aggregate_specimens(&results)?,
        slides,
        wall,
        workers,
    })
}

/// Linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

fn quartiles(values: impl Iterator<Item = f64>) -> Quartiles {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    Quartiles {
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSummary {
    pub n_slides: usize,
    pub n_no_roi: usize,
    /// Per column of [`STAGE_NAMES`].
    pub stages: [Quartiles; 7],
    pub median_total_ms: f64,
    /// NaN when every slide lacks an ROI.
    pub median_total_excluding_no_roi_ms: f64,
    pub wall_s: f64,
    pub slides_per_second: f64,
}

impl ProfileSummary {
    pub fn slides_per_hour(&self) -> f64 {
        self.slides_per_second * 3600.0
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "slides {}\nno_roi {}\nwall_s {}\nslides_per_second {}\nslides_per_hour {}\nmedian_total_ms {}\nmedian_total_excluding_no_roi_ms {}\n",
            self.n_slides,
            self.n_no_roi,
            self.wall_s,
            self.slides_per_second,
            self.slides_per_hour(),
            self.median_total_ms,
            self.median_total_excluding_no_roi_ms
        );
        for (name, q) in STAGE_NAMES.iter().zip(&self.stages) {
            s += &format!("stage {name} q1 {} median {} q3 {}\n", q.q1, q.median, q.q3);
        }
        s
    }
}

/// `no_roi[i]` marks slides without ROI (or failed). Throughput is
/// `timings.len() / wall`.
pub fn profile(timings: &[StageTiming], no_roi: &[bool], wall: Duration) -> Result<ProfileSummary> {
    if timings.is_empty() {
        return Err(Error::invalid("profile needs at least one timing"));
    }
    if timings.len() != no_roi.len() {
        return Err(Error::invalid("timings and no-ROI flags differ in length"));
    }
    let stages: [Quartiles; 7] = std::array::from_fn(|k| quartiles(timings.iter().map(|t| t.columns()[k])));
    let excl = quartiles(timings.iter().zip(no_roi).filter(|(_, n)| !**n).map(|(t, _)| t.total_ms));
    let wall_s = wall.as_secs_f64();
    Ok(ProfileSummary {
        n_slides: timings.len(),
        n_no_roi: no_roi.iter().filter(|&&n| n).count(),
        median_total_ms: stages[6].median,
        median_total_excluding_no_roi_ms: excl.median,
        stages,
        wall_s,
        slides_per_second: if wall_s > 0.0 { timings.len() as f64 / wall_s } else { 0.0 },
    })
}

pub fn profile_run(run: &CorpusRun) -> Result<ProfileSummary> {
    let timings: Vec<StageTiming> = run.slides.iter().map(|s| s.timing).collect();
    let no_roi: Vec<bool> = run
        .slides
        .iter()
        .map(|s| !matches!(s.result.outcome, SlideOutcome::Classified { .. }))
        .collect();
    profile(&timings, &no_roi, run.wall)
}

/// Resolves the raster root: explicit config value, else the manifest directory.
pub fn raster_root(cfg: &Config, manifest_path: &Path) -> PathBuf {
    cfg.raster_root
        .clone()
        .unwrap_or_else(|| manifest_path.parent().map(Path::to_path_buf).unwrap_or_default())
}
