//! Flat `key = value` configuration. Blank lines and `#` comments are
//! ignored; unknown keys are an error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::classifier::{TrainConfig, DEFAULT_KEEP_PROB};
use crate::confidence::{DEFAULT_T, DEFAULT_TARGETS};
use crate::error::{Error, Result};
use crate::roi::DEFAULT_THETA;
use crate::tiling::TilingParams;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub tiling: TilingParams,
    pub adaptation_enabled: bool,
    pub roi_theta: f64,
    pub mc_t: usize,
    pub keep_prob: f64,
    pub targets: Vec<f64>,
    /// Confidence level used for the final column of the results file;
    /// 0 reports unthresholded outcomes.
    pub report_level: usize,
    pub classifier: TrainConfig,
    pub finetune_epochs: usize,
    pub finetune_lr_scale: f64,
    pub seed: u64,
    pub workers: usize,
    /// Base directory for relative raster paths; defaults to the manifest's directory.
    pub raster_root: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            tiling: TilingParams::default(),
            adaptation_enabled: true,
            roi_theta: DEFAULT_THETA,
            mc_t: DEFAULT_T,
            keep_prob: DEFAULT_KEEP_PROB,
            targets: DEFAULT_TARGETS.to_vec(),
            report_level: 1,
            classifier: TrainConfig::default(),
            finetune_epochs: 100,
            finetune_lr_scale: 0.1,
            seed: 0,
            workers: 1,
            raster_root: None,
        }
    }
}

/// Every accepted key with its default, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("tiling.s_min", "minimum HSV saturation of a tissue pixel (0.08)"),
    ("tiling.l_max", "maximum normalized luminance of a tissue pixel (0.82)"),
    ("tiling.min_tissue_fraction", "minimum tissue fraction of a kept tile (0.25)"),
    ("tiling.tile_px", "tile edge in pixels (128)"),
    ("adaptation.enabled", "apply lab-to-reference color adaptation (true)"),
    ("roi.theta", "minimum lesion fraction of a selected tile (0.05)"),
    ("confidence.T", "stochastic repetitions per slide (30)"),
    ("confidence.keep_prob", "hidden-unit keep probability (0.30)"),
    ("confidence.targets", "comma-separated target accuracies (0.90,0.95,0.98)"),
    ("confidence.report_level", "level used in results.csv, 0 = none (1)"),
    ("classifier.epochs", "training epochs (300)"),
    ("classifier.learning_rate", "Adam learning rate (0.003)"),
    ("classifier.batch_size", "minibatch size (32)"),
    ("classifier.seed", "initialization and shuffling seed (0)"),
    ("classifier.finetune_epochs", "per-lab fine-tuning epochs (100)"),
    ("classifier.finetune_lr_scale", "fine-tuning learning-rate multiplier (0.1)"),
    ("run.seed", "global seed for per-slide random streams (0)"),
    ("run.workers", "parallel slide workers (1)"),
    ("paths.raster_root", "base directory for relative raster paths (manifest directory)"),
];

fn value<T: FromStr>(key: &str, raw: &str, line: usize, name: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::parse(name, line, format!("bad value for {key}: {e}")))
}

impl Config {
    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(name, i + 1, "expected `key = value`"))?;
            cfg.set(key.trim(), val.trim(), i + 1, name)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override (as from the command line).
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), v.trim(), 0, "override")?;
        self.validate()
    }

    fn set(&mut self, key: &str, v: &str, ln: usize, name: &str) -> Result<()> {
        match key {
            "tiling.s_min" => self.tiling.s_min = value(key, v, ln, name)?,
            "tiling.l_max" => self.tiling.l_max = value(key, v, ln, name)?,
            "tiling.min_tissue_fraction" => self.tiling.min_tissue_fraction = value(key, v, ln, name)?,
            "tiling.tile_px" => self.tiling.tile_px = value(key, v, ln, name)?,
            "adaptation.enabled" => self.adaptation_enabled = value(key, v, ln, name)?,
            "roi.theta" => self.roi_theta = value(key, v, ln, name)?,
            "confidence.T" => self.mc_t = value(key, v, ln, name)?,
            "confidence.keep_prob" => {
                self.keep_prob = value(key, v, ln, name)?;
                self.classifier.keep_prob = self.keep_prob;
            }
            "confidence.targets" => {
                self.targets = v
                    .split(',')
                    .map(|t| value::<f64>(key, t.trim(), ln, name))
                    .collect::<Result<_>>()?
            }
            "confidence.report_level" => self.report_level = value(key, v, ln, name)?,
            "classifier.epochs" => self.classifier.epochs = value(key, v, ln, name)?,
            "classifier.learning_rate" => self.classifier.learning_rate = value(key, v, ln, name)?,
            "classifier.batch_size" => self.classifier.batch_size = value(key, v, ln, name)?,
            "classifier.seed" => self.classifier.seed = value(key, v, ln, name)?,
            "classifier.finetune_epochs" => self.finetune_epochs = value(key, v, ln, name)?,
            "classifier.finetune_lr_scale" => self.finetune_lr_scale = value(key, v, ln, name)?,
            "run.seed" => self.seed = value(key, v, ln, name)?,
            "run.workers" => self.workers = value(key, v, ln, name)?,
            "paths.raster_root" => self.raster_root = Some(PathBuf::from(v)),
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tiling.tile_px == 0 {
            return bad("tiling.tile_px must be positive".into());
        }
        if self.mc_t == 0 {
            return bad("confidence.T must be at least 1".into());
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("confidence.keep_prob {} outside (0, 1]", self.keep_prob));
        }
        if self.targets.is_empty() || self.targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("confidence.targets must be values in [0, 1]".into());
        }
        if self.targets.windows(2).any(|w| w[1] < w[0]) {
            return bad("confidence.targets must be non-decreasing".into());
        }
        if self.report_level > self.targets.len() {
            return bad(format!("confidence.report_level {} exceeds the number of targets", self.report_level));
        }
        if self.classifier.batch_size == 0 {
            return bad("classifier.batch_size must be positive".into());
        }
        if self.workers == 0 {
            return bad("run.workers must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.roi_theta) {
            return bad("roi.theta must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let targets: Vec<String> = self.targets.iter().map(|t| t.to_string()).collect();
        let c = &self.classifier;
        let _ = writeln!(s, "tiling.s_min = {}", self.tiling.s_min);
        let _ = writeln!(s, "tiling.l_max = {}", self.tiling.l_max);
        let _ = writeln!(s, "tiling.min_tissue_fraction = {}", self.tiling.min_tissue_fraction);
        let _ = writeln!(s, "tiling.tile_px = {}", self.tiling.tile_px);
        let _ = writeln!(s, "adaptation.enabled = {}", self.adaptation_enabled);
        let _ = writeln!(s, "roi.theta = {}", self.roi_theta);
        let _ = writeln!(s, "confidence.T = {}", self.mc_t);
        let _ = writeln!(s, "confidence.keep_prob = {}", self.keep_prob);
        let _ = writeln!(s, "confidence.targets = {}", targets.join(","));
        let _ = writeln!(s, "confidence.report_level = {}", self.report_level);
        let _ = writeln!(s, "classifier.epochs = {}", c.epochs);
        let _ = writeln!(s, "classifier.learning_rate = {}", c.learning_rate);
        let _ = writeln!(s, "classifier.batch_size = {}", c.batch_size);
        let _ = writeln!(s, "classifier.seed = {}", c.seed);
        let _ = writeln!(s, "classifier.finetune_epochs = {}", self.finetune_epochs);
        let _ = writeln!(s, "classifier.finetune_lr_scale = {}", self.finetune_lr_scale);
        let _ = writeln!(s, "run.seed = {}", self.seed);
        let _ = writeln!(s, "run.workers = {}", self.workers);
        if let Some(root) = &self.raster_root {
            let _ = writeln!(s, "paths.raster_root = {}", root.display());
        }
        s
    }
}
