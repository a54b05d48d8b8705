//! Run output files: specimen results, per-slide predictions, stage timing
//! and the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use crate::aggregation::{finalize, FinalOutcome, SlideOutcome, SlideResult, SpecimenOutcome, SpecimenResult};
use crate::confidence::{PredictionMatrix, Threshold, ThresholdSet};
use crate::error::{Error, Result};
use crate::evaluation::level_name;
use crate::label::ClassLabel;
use crate::pipeline::{SlideRun, StageTiming};

pub const RESULTS_HEADER: &str = "specimen_id,final,class,score,level,source_slide";
pub const SLIDES_HEADER: &str = "slide_id,specimen_id,outcome,class,score,mean_basaloid,mean_squamous,mean_melanocytic,mean_other,error";
pub const TIMING_HEADER: &str = "slide_id,segment_ms,tile_ms,adapt_ms,roi_ms,classify_ms,score_ms,total_ms";

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// One line per specimen, thresholded at `level` (0 = unthresholded).
pub fn results_csv(specimens: &[SpecimenResult], thresholds: Option<&ThresholdSet>, level: usize) -> Result<String> {
    let threshold = if level == 0 {
        Threshold::Value(f64::NEG_INFINITY)
    } else {
        thresholds
            .and_then(|t| t.get(level))
            .ok_or_else(|| Error::invalid(format!("no threshold for level {level}")))?
    };
    let name = level_name((level > 0).then_some(level));
    let mut s = format!("{RESULTS_HEADER}\n");
    for spec in specimens {
        let fin = finalize(spec, threshold);
        let outcome = fin.final_outcome.unwrap_or(FinalOutcome::NoRoi);
        match &spec.outcome {
            SpecimenOutcome::Classified { class, score, source_slide, .. } => {
                let _ = writeln!(s, "{},{},{},{},{},{}", spec.specimen_id, outcome, class, score, name, source_slide);
            }
            SpecimenOutcome::NoRoi => {
                let _ = writeln!(s, "{},{},,,{},", spec.specimen_id, outcome, name);
            }
        }
    }
    Ok(s)
}

/// Per-slide outcomes with the column means of each prediction matrix;
/// enough to re-aggregate and evaluate without rerunning.
pub fn slides_csv(slides: &[SlideRun]) -> String {
    let mut s = format!("{SLIDES_HEADER}\n");
    for run in slides {
        let r = &run.result;
        match &r.outcome {
            SlideOutcome::Classified { class, score, matrix } => {
                let m = matrix.column_means();
                let _ = writeln!(s, "{},{},classified,{},{},{},{},{},{},", r.slide_id, r.specimen_id, class, score, m[0], m[1], m[2], m[3]);
            }
            SlideOutcome::NoRoi => {
                let _ = writeln!(s, "{},{},no_roi,,,,,,,", r.slide_id, r.specimen_id);
            }
            SlideOutcome::Failed { error } => {
                let clean = error.replace([',', '\n'], " ");
                let _ = writeln!(s, "{},{},failed,,,,,,,{}", r.slide_id, r.specimen_id, clean);
            }
        }
    }
    s
}

/// Inverse of [`slides_csv`]. Classified slides carry a one-row matrix of
/// their column means, which preserves score, class and ROC inputs.
pub fn parse_slides_csv(text: &str, name: &str) -> Result<Vec<SlideResult>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SLIDES_HEADER => {}
        _ => return Err(Error::parse(name, 1, "unexpected slides header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let ln = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::parse(name, ln, format!("expected 10 fields, found {}", f.len())));
        }
        let num = |v: &str| v.parse::<f64>().map_err(|e| Error::parse(name, ln, e.to_string()));
        let outcome = match f[2] {
            "classified" => {
                let class: ClassLabel = f[3].parse().map_err(|_| Error::parse(name, ln, "bad class"))?;
                let means = [num(f[5])?, num(f[6])?, num(f[7])?, num(f[8])?];
                SlideOutcome::Classified {
                    class,
                    score: num(f[4])?,
                    matrix: PredictionMatrix::new(vec![means]).map_err(|e| Error::parse(name, ln, e.to_string()))?,
                }
            }
            "no_roi" => SlideOutcome::NoRoi,
            "failed" => SlideOutcome::Failed { error: f[9].to_string() },
            other => return Err(Error::parse(name, ln, format!("unknown outcome `{other}`"))),
        };
        out.push(SlideResult {
            slide_id: f[0].to_string(),
            specimen_id: f[1].to_string(),
            outcome,
        });
    }
    Ok(out)
}

pub fn timing_csv(slides: &[SlideRun]) -> String {
    let mut s = format!("{TIMING_HEADER}\n");
    for r in slides {
        let t = &r.timing;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.result.slide_id, t.segment_ms, t.tile_ms, t.adapt_ms, t.roi_ms, t.classify_ms, t.score_ms, t.total_ms
        );
    }
    s
}

pub fn parse_timing_csv(text: &str, name: &str) -> Result<Vec<(String, StageTiming)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TIMING_HEADER => {}
        _ => return Err(Error::parse(name, 1, "unexpected timing header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::parse(name, i + 1, "expected 8 fields"));
        }
        let v: Vec<f64> = f[1..]
            .iter()
            .map(|x| x.parse::<f64>().map_err(|e| Error::parse(name, i + 1, e.to_string())))
            .collect::<Result<_>>()?;
        out.push((
            f[0].to_string(),
            StageTiming {
                segment_ms: v[0],
                tile_ms: v[1],
                adapt_ms: v[2],
                roi_ms: v[3],
                classify_ms: v[4],
                score_ms: v[5],
                total_ms: v[6],
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub workers: usize,
    pub input_manifest: String,
    pub input_manifest_sha256: String,
    pub models_dir: String,
    pub model_sha256: BTreeMap<String, String>,
    pub wall_s: f64,
    pub config: String,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("wsi-triage-run v1\n");
        let _ = writeln!(s, "run_id {}", self.run_id);
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "workers {}", self.workers);
        let _ = writeln!(s, "input_manifest {}", self.input_manifest);
        let _ = writeln!(s, "input_manifest_sha256 {}", self.input_manifest_sha256);
        let _ = writeln!(s, "models {}", self.models_dir);
        for (k, v) in &self.model_sha256 {
            let _ = writeln!(s, "model_sha256 {k} {v}");
        }
        let _ = writeln!(s, "wall_s {}", self.wall_s);
        s += "[config]\n";
        s += &self.config;
        s
    }

    /// Reads the fields needed to reproduce a run.
    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "wsi-triage-run v1")) => {}
            _ => return Err(Error::parse(name, 1, "expected run manifest header")),
        }
        let mut m = RunManifest {
            run_id: String::new(),
            seed: 0,
            workers: 1,
            input_manifest: String::new(),
            input_manifest_sha256: String::new(),
            models_dir: String::new(),
            model_sha256: BTreeMap::new(),
            wall_s: 0.0,
            config: String::new(),
        };
        let mut in_config = false;
        for (i, line) in lines {
            if in_config {
                m.config.push_str(line);
                m.config.push('\n');
                continue;
            }
            if line == "[config]" {
                in_config = true;
                continue;
            }
            let (k, v) = line.split_once(' ').ok_or_else(|| Error::parse(name, i + 1, "expected `key value`"))?;
            let bad = |e: String| Error::parse(name, i + 1, e);
            match k {
                "run_id" => m.run_id = v.to_string(),
                "seed" => m.seed = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "workers" => m.workers = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "input_manifest" => m.input_manifest = v.to_string(),
                "input_manifest_sha256" => m.input_manifest_sha256 = v.to_string(),
                "models" => m.models_dir = v.to_string(),
                "model_sha256" => {
                    let (file, hash) = v.split_once(' ').ok_or_else(|| bad("expected file and hash".into()))?;
                    m.model_sha256.insert(file.to_string(), hash.to_string());
                }
                "wall_s" => m.wall_s = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                other => return Err(bad(format!("unknown field `{other}`"))),
            }
        }
        Ok(m)
    }
}

/// Writes `results.csv`, `slides.csv`, `timing.csv` and `run_manifest.txt` under `dir`.
pub fn write_run(dir: &Path, slides: &[SlideRun], specimens: &[SpecimenResult], thresholds: Option<&ThresholdSet>, level: usize, manifest: &RunManifest) -> Result<()> {
    write(&dir.join("results.csv"), &results_csv(specimens, thresholds, level)?)?;
    write(&dir.join("slides.csv"), &slides_csv(slides))?;
    write(&dir.join("timing.csv"), &timing_csv(slides))?;
    write(&dir.join("run_manifest.txt"), &manifest.to_text())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text)
}

pub fn read_text(path: &Path) -> Result<String> {
    read(path)
}

pub fn duration_s(d: Duration) -> f64 {
    d.as_secs_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::aggregate_specimens;

    fn runs() -> Vec<SlideRun> {
        let classified = |id: &str, spec: &str, row: [f64; 4]| SlideRun {
            result: SlideResult {
                slide_id: id.into(),
                specimen_id: spec.into(),
                outcome: SlideOutcome::Classified {
                    class: crate::confidence::score(&PredictionMatrix::new(vec![row, row]).unwrap()).class,
                    score: row.iter().cloned().fold(0.0, f64::max),
                    matrix: PredictionMatrix::new(vec![row, row]).unwrap(),
                },
            },
            timing: StageTiming {
                total_ms: 3.5,
                ..StageTiming::default()
            },
        };
        vec![
            classified("a-w0", "a", [0.9, 0.1, 0.2, 1.0 / 3.0]),
            SlideRun {
                result: SlideResult {
                    slide_id: "a-w1".into(),
                    specimen_id: "a".into(),
                    outcome: SlideOutcome::Failed { error: "io, bad\nthing".into() },
                },
                timing: StageTiming::default(),
            },
            classified("b-w0", "b", [0.1, 0.4, 0.2, 0.3]),
            SlideRun {
                result: SlideResult {
                    slide_id: "c-w0".into(),
                    specimen_id: "c".into(),
                    outcome: SlideOutcome::NoRoi,
                },
                timing: StageTiming::default(),
            },
        ]
    }

    #[test]
    fn slides_round_trip_preserves_aggregation() {
        let r = runs();
        let parsed = parse_slides_csv(&slides_csv(&r), "s").unwrap();
        let original: Vec<SlideResult> = r.iter().map(|x| x.result.clone()).collect();
        assert_eq!(aggregate_specimens(&parsed).unwrap(), aggregate_specimens(&original).unwrap());
    }

    #[test]
    fn results_lines() {
        let specs = aggregate_specimens(&runs().iter().map(|x| x.result.clone()).collect::<Vec<_>>()).unwrap();
        let set = ThresholdSet {
            targets: vec![0.9],
            thresholds: vec![Threshold::Value(0.5)],
        };
        let text = results_csv(&specs, Some(&set), 1).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], RESULTS_HEADER);
        assert_eq!(lines[1], "a,classified,Basaloid,0.9,1,a-w0");
        assert_eq!(lines[2], "b,below_threshold,Squamous,0.4,1,b-w0");
        assert_eq!(lines[3], "c,no_roi,,,1,");
        assert!(results_csv(&specs, None, 2).is_err());
        assert!(results_csv(&specs, None, 0).unwrap().contains("b,classified"));
    }

    #[test]
    fn timing_round_trips() {
        let r = runs();
        let parsed = parse_timing_csv(&timing_csv(&r), "t").unwrap();
        assert_eq!(parsed.len(), 4);
        assert_eq!(parsed[0].1, r[0].timing);
    }

    #[test]
    fn run_manifest_round_trips() {
        let m = RunManifest {
            run_id: "abc".into(),
            seed: 9,
            workers: 4,
            input_manifest: "/x/manifest.txt".into(),
            input_manifest_sha256: "00".into(),
            models_dir: "/x/models".into(),
            model_sha256: [("classifier.txt".to_string(), "ff".to_string())].into(),
            wall_s: 1.5,
            config: "run.seed = 9\n".into(),
        };
        assert_eq!(RunManifest::parse(&m.to_text(), "m").unwrap(), m);
    }
}
