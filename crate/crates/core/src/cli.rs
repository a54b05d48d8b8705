//! Command-line driver. Exit codes: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::aggregation::{SlideOutcome, SlideResult};
use crate::config::{Config, KEYS};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::manifest::{build_splits_with, load_manifest, save_manifest, DatasetManifest, SlideRecord, Split, SplitScheme};
use crate::models::{sha256_hex, ModelBundle};
use crate::output::{parse_slides_csv, parse_timing_csv, read_text, write_run, write_text, RunManifest};
use crate::pipeline::{aggregate_specimens, profile, raster_root, run_corpus, FileSource};
use crate::synth::{default_labs, generate_corpus_with, SlideGeometry};
use crate::workflow::{calibrate_lab, train_reference};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "wsi-triage", version, about = "Whole-slide-image triage with calibrated confidence levels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines (see `wsi-triage keys`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set run.workers=4`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-lab corpus (PPM rasters, PGM masks, manifest.txt)
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Specimens per lab
        #[arg(long, default_value_t = 40)]
        specimens: usize,
        /// Comma-separated lab ids from: ref, lab-a, lab-b, lab-c
        #[arg(long, default_value = "ref,lab-a,lab-b,lab-c")]
        labs: String,
        /// Maximum slides per specimen (minimum is 1)
        #[arg(long, default_value_t = 2)]
        max_slides: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1024)]
        height: usize,
        #[arg(long, default_value_t = 1536)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Assign specimens to splits: the development lab gets train/validation/test,
    /// every other lab calib_finetune/calib_validation/test
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ref")]
        dev_lab: String,
        #[arg(long, default_value = "0.7,0.15,0.15")]
        dev_ratios: String,
        #[arg(long, default_value = "0.48,0.12,0.40")]
        calib_ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit reference statistics, segmenter and classifier on the train split
    /// and reference thresholds on the validation split
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Output model directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Per-lab calibration: lab color statistics, fine-tuning and thresholds
    Calibrate {
        /// Reference model directory
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        lab: String,
        /// Output model directory for this lab
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run frozen models over a manifest
    Run {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for results.csv, slides.csv, timing.csv, run_manifest.txt
        #[arg(long)]
        out: PathBuf,
        /// Only slides in this split
        #[arg(long)]
        split: Option<String>,
        /// Only slides from this lab
        #[arg(long)]
        lab: Option<String>,
        /// Overrides run.workers
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides run.seed
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Specimen metrics per confidence level from a run directory
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Model directory holding thresholds.txt; defaults to the one recorded in the run
        #[arg(long)]
        models: Option<PathBuf>,
        /// Output directory for report.txt and CSVs; defaults to the run directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage timing summary of a run directory
    Profile {
        #[arg(long)]
        run: PathBuf,
    },
    /// List every config key with its default
    Keys,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::UnknownConfigKey(_) | Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs the command. Output
/// goes to stdout, diagnostics to stderr; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &args.overrides {
        cfg.set_override(o)?;
    }
    Ok(cfg)
}

fn parse_ratios(raw: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = raw
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad ratio `{t}`: {e}"))))
        .collect::<Result<_>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| Error::Config(format!("expected three ratios, got `{raw}`")))
}

fn in_split(m: &DatasetManifest, split: Split) -> Vec<SlideRecord> {
    m.in_split(split).cloned().collect()
}

fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::Synth {
            out,
            specimens,
            labs,
            max_slides,
            seed,
            height,
            width,
            workers,
        } => {
            let all = default_labs();
            let chosen = labs
                .split(',')
                .map(|id| {
                    all.iter()
                        .find(|l| l.lab_id == id.trim())
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("unknown lab `{id}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if max_slides == 0 {
                return Err(Error::Config("--max-slides must be at least 1".into()));
            }
            let corpus = generate_corpus_with(specimens, &chosen, 1..=max_slides, seed, SlideGeometry { height, width })?;
            let path = corpus.store(&out, workers)?;
            Ok(format!("wrote {} slides to {}\n", corpus.manifest.len(), path.display()))
        }
        Command::Split {
            manifest,
            out,
            dev_lab,
            dev_ratios,
            calib_ratios,
            seed,
        } => {
            let dev_ratios = parse_ratios(&dev_ratios)?;
            let calib_ratios = parse_ratios(&calib_ratios)?;
            let input = rebase(&load_manifest(&manifest)?, &manifest, &out)?;
            let mut result = DatasetManifest::default();
            for lab in input.labs() {
                let part = input.filtered(|r| r.lab_id == lab);
                let (scheme, ratios) = if lab == dev_lab {
                    (SplitScheme::Development, dev_ratios)
                } else {
                    (SplitScheme::Calibration, calib_ratios)
                };
                result = result.merged(&build_splits_with(&part, scheme, ratios, seed)?)?;
            }
            save_manifest(&result, &out)?;
            let mut s = String::new();
            for split in [Split::Train, Split::Validation, Split::CalibFinetune, Split::CalibValidation, Split::Test] {
                let _ = writeln!(s, "{split} {}", result.in_split(split).count());
            }
            Ok(s)
        }
        Command::Train { manifest, out, config } => {
            let cfg = load_config(&config)?;
            let m = load_manifest(&manifest)?;
            let source = FileSource::new(raster_root(&cfg, &manifest));
            let (bundle, report) = train_reference(&in_split(&m, Split::Train), &in_split(&m, Split::Validation), &source, &cfg)?;
            bundle.save(&out)?;
            let mut s = format!(
                "train_slides {}\ntrain_embeddings {}\ntrain_accuracy {}\nvalidation_specimens {}\nvalidation_classified {}\nvalidation_accuracy {}\n",
                report.train_slides,
                report.train_embeddings,
                report.train_accuracy,
                report.validation.specimens,
                report.validation.classified,
                report.validation.accuracy
            );
            s += &report.validation.thresholds.to_text();
            write_text(&out.join("train_report.txt"), &s)?;
            Ok(s)
        }
        Command::Calibrate {
            models,
            manifest,
            lab,
            out,
            config,
        } => {
            let cfg = load_config(&config)?;
            let base = ModelBundle::load(&models)?;
            let m = load_manifest(&manifest)?.filtered(|r| r.lab_id == lab);
            if m.is_empty() {
                return Err(Error::invalid(format!("{}: no slides for lab `{lab}`", manifest.display())));
            }
            let source = FileSource::new(raster_root(&cfg, &manifest));
            let (bundle, report) = calibrate_lab(
                &base,
                &in_split(&m, Split::CalibFinetune),
                &in_split(&m, Split::CalibValidation),
                &source,
                &cfg,
            )?;
            bundle.save(&out)?;
            let mut s = format!(
                "lab {lab}\nfinetune_slides {}\nfinetune_embeddings {}\nvalidation_specimens {}\nvalidation_classified {}\nvalidation_accuracy {}\n",
                report.finetune_slides,
                report.finetune_embeddings,
                report.validation.specimens,
                report.validation.classified,
                report.validation.accuracy
            );
            s += &report.validation.thresholds.to_text();
            write_text(&out.join("calibration_report.txt"), &s)?;
            Ok(s)
        }
        Command::Run {
            models,
            manifest,
            out,
            split,
            lab,
            workers,
            seed,
            config,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(w) = workers {
                cfg.set_override(&format!("run.workers={w}"))?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let split = split.map(|s| s.parse::<Split>().map_err(|e| Error::Config(e.to_string()))).transpose()?;
            let bundle = ModelBundle::load(&models)?;
            let manifest_text = read_text(&manifest)?;
            let m = DatasetManifest::parse(&manifest_text, &manifest.display().to_string())?;
            let records: Vec<SlideRecord> = m
                .records()
                .iter()
                .filter(|r| split.is_none_or(|s| m.split_of(&r.slide_id) == Some(s)))
                .filter(|r| lab.as_ref().is_none_or(|l| &r.lab_id == l))
                .cloned()
                .collect();
            let source = FileSource::new(raster_root(&cfg, &manifest));
            let run = run_corpus(&records, &source, &bundle, &cfg, cfg.workers)?;
            let input_sha = sha256_hex(manifest_text.as_bytes());
            let model_sha256: std::collections::BTreeMap<String, String> =
                bundle.hashes().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            let config_text = cfg.to_text();
            let mut id_src = format!("{input_sha}\n{config_text}\n{split:?}\n{lab:?}\n");
            model_sha256.values().for_each(|h| id_src.push_str(h));
            let run_manifest = RunManifest {
                run_id: sha256_hex(id_src.as_bytes())[..16].to_string(),
                seed: cfg.seed,
                workers: cfg.workers,
                input_manifest: manifest.display().to_string(),
                input_manifest_sha256: input_sha,
                models_dir: models.display().to_string(),
                model_sha256,
                wall_s: run.wall.as_secs_f64(),
                config: config_text,
            };
            write_run(&out, &run.slides, &run.specimens, bundle.thresholds.as_ref(), cfg.report_level, &run_manifest)?;
            let failed = run
                .slides
                .iter()
                .filter(|s| matches!(s.result.outcome, SlideOutcome::Failed { .. }))
                .count();
            Ok(format!(
                "slides {}\nspecimens {}\nfailed_slides {failed}\nwall_s {}\nslides_per_second {}\n",
                run.slides.len(),
                run.specimens.len(),
                run.wall.as_secs_f64(),
                run.throughput_per_second()
            ))
        }
        Command::Evaluate {
            run,
            manifest,
            models,
            out,
        } => {
            let slides_path = run.join("slides.csv");
            let slides: Vec<SlideResult> = parse_slides_csv(&read_text(&slides_path)?, &slides_path.display().to_string())?;
            let models = match models {
                Some(m) => m,
                None => PathBuf::from(read_run_manifest(&run)?.models_dir),
            };
            let bundle = ModelBundle::load(&models)?;
            let thresholds = bundle
                .thresholds
                .ok_or_else(|| Error::invalid(format!("{}: no thresholds.txt", models.display())))?;
            let truths = load_manifest(&manifest)?.specimen_truths();
            let report = evaluate(&aggregate_specimens(&slides)?, &truths, &thresholds)?;
            let out = out.unwrap_or(run);
            let text = report.to_text();
            write_text(&out.join("report.txt"), &text)?;
            write_text(&out.join("levels.csv"), &report.levels_csv())?;
            write_text(&out.join("confusion.csv"), &report.confusion_csv())?;
            write_text(&out.join("roc.csv"), &report.roc_csv())?;
            Ok(text)
        }
        Command::Profile { run } => {
            let timing_path = run.join("timing.csv");
            let timings = parse_timing_csv(&read_text(&timing_path)?, &timing_path.display().to_string())?;
            let slides_path = run.join("slides.csv");
            let slides = parse_slides_csv(&read_text(&slides_path)?, &slides_path.display().to_string())?;
            let no_roi: Vec<bool> = slides
                .iter()
                .map(|s| !matches!(s.outcome, SlideOutcome::Classified { .. }))
                .collect();
            let wall = std::time::Duration::from_secs_f64(read_run_manifest(&run)?.wall_s.max(0.0));
            let t: Vec<_> = timings.into_iter().map(|(_, t)| t).collect();
            let summary = profile(&t, &no_roi, wall)?;
            let text = summary.to_text();
            write_text(&run.join("profile.txt"), &text)?;
            Ok(text)
        }
        Command::Keys => Ok(KEYS.iter().map(|(k, doc)| format!("{k}\t{doc}\n")).collect()),
    }
}

fn read_run_manifest(run: &Path) -> Result<RunManifest> {
    let path = run.join("run_manifest.txt");
    RunManifest::parse(&read_text(&path)?, &path.display().to_string())
}

/// Rewrites relative raster paths so they stay valid when the manifest is
/// written to a different directory.
fn rebase(m: &DatasetManifest, from: &Path, to: &Path) -> Result<DatasetManifest> {
    let from_dir = from.parent().unwrap_or(Path::new(""));
    let to_dir = to.parent().unwrap_or(Path::new(""));
    if from_dir == to_dir {
        return Ok(m.clone());
    }
    let base = std::path::absolute(from_dir).map_err(|e| Error::io(from_dir, e))?;
    let records = m
        .records()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.raster_path.is_relative() {
                r.raster_path = base.join(&r.raster_path);
            }
            r
        })
        .collect();
    DatasetManifest::new(records)
}
