//! Model training on the reference lab and per-lab calibration.

use rayon::prelude::*;

use crate::adaptation::StatsAccumulator;
use crate::aggregation::{SpecimenOutcome, SpecimenResult};
use crate::classifier::{self, NetParams, SlideEmbedding, TrainConfig};
use crate::confidence::{calibrate_thresholds, ThresholdSet};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::label::ClassLabel;
use crate::manifest::SlideRecord;
use crate::models::ModelBundle;
use crate::pipeline::{prepared_tiles, run_corpus, slide_embedding, SlideSource};
use crate::roi::{Segmenter, SegmenterConfig};
use crate::seed::rng_for;
use crate::tiling::{segment_tissue, tile, Tile};

/// Tiles per training slide used to fit the segmenter.
const SEGMENTER_TILES_PER_SLIDE: usize = 6;

fn par_map<T: Send>(records: &[SlideRecord], workers: usize, f: impl Fn(&SlideRecord) -> Result<T> + Sync) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    pool.install(|| records.par_iter().with_max_len(1).map(&f).collect())
}

fn sorted(records: &[SlideRecord]) -> Vec<SlideRecord> {
    let mut v = records.to_vec();
    v.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    v
}

/// Tissue statistics of every slide, merged in slide-id order.
fn domain_stats(records: &[SlideRecord], source: &dyn SlideSource, cfg: &Config) -> Result<StatsAccumulator> {
    let parts = par_map(records, cfg.workers, |r| {
        let raster = source.load(r)?;
        let tiles = tile(&r.slide_id, &raster, &segment_tissue(&raster, &cfg.tiling), &cfg.tiling)?;
        let mut acc = StatsAccumulator::default();
        tiles.iter().for_each(|t| acc.push_tile(t));
        Ok(acc)
    })?;
    let mut total = StatsAccumulator::default();
    parts.iter().for_each(|p| total.merge(p));
    Ok(total)
}

fn embeddings(records: &[SlideRecord], source: &dyn SlideSource, models: &ModelBundle, cfg: &Config) -> Result<Vec<(SlideEmbedding, ClassLabel)>> {
    let per_slide = par_map(records, cfg.workers, |r| {
        let raster = source.load(r)?;
        Ok(slide_embedding(&raster, &r.slide_id, models, cfg)?.map(|e| (e, r.truth)))
    })?;
    Ok(per_slide.into_iter().flatten().collect())
}

/// Specimen-level (score, correct) pairs for classified specimens.
pub fn scored_specimens(specimens: &[SpecimenResult], records: &[SlideRecord]) -> Vec<(f64, bool)> {
    let truth = |id: &str| records.iter().find(|r| r.specimen_id == id).map(|r| r.truth);
    specimens
        .iter()
        .filter_map(|s| match &s.outcome {
            SpecimenOutcome::Classified { class, score, .. } => Some((*score, Some(*class) == truth(&s.specimen_id))),
            SpecimenOutcome::NoRoi => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSummary {
    pub specimens: usize,
    pub classified: usize,
    /// Unthresholded accuracy over specimens with an ROI; NaN if none.
    pub accuracy: f64,
    pub thresholds: ThresholdSet,
}

fn validate(bundle: &ModelBundle, records: &[SlideRecord], source: &dyn SlideSource, cfg: &Config) -> Result<ValidationSummary> {
    let run = run_corpus(records, source, bundle, cfg, cfg.workers)?;
    let scored = scored_specimens(&run.specimens, records);
    if scored.is_empty() {
        return Err(Error::invalid("no validation specimen produced a prediction; cannot calibrate thresholds"));
    }
    let correct = scored.iter().filter(|s| s.1).count();
    Ok(ValidationSummary {
        specimens: run.specimens.len(),
        classified: scored.len(),
        accuracy: correct as f64 / scored.len() as f64,
        thresholds: calibrate_thresholds(&scored, &cfg.targets)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub train_slides: usize,
    pub train_embeddings: usize,
    pub train_accuracy: f64,
    pub validation: ValidationSummary,
}

/// Fits reference statistics, the segmenter and the classifier on
/// `train`, then calibrates reference thresholds on `validation`.
pub fn train_reference(train: &[SlideRecord], validation: &[SlideRecord], source: &dyn SlideSource, cfg: &Config) -> Result<(ModelBundle, TrainReport)> {
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if validation.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    let train = sorted(train);

    let per_slide = par_map(&train, cfg.workers, |r| {
        let (raster, lesion) = source.load_annotated(r)?;
        let tiles = tile(&r.slide_id, &raster, &segment_tissue(&raster, &cfg.tiling), &cfg.tiling)?;
        let mut acc = StatsAccumulator::default();
        tiles.iter().for_each(|t| acc.push_tile(t));
        let mut rng = rng_for(cfg.seed, &format!("segmenter-sample/{}", r.slide_id));
        let picks = rand::seq::index::sample(&mut rng, tiles.len(), SEGMENTER_TILES_PER_SLIDE.min(tiles.len()));
        let samples: Vec<(Tile, Mask)> = picks
            .into_iter()
            .map(|i| {
                let t = &tiles[i];
                let m = lesion.crop(t.origin.0, t.origin.1, t.size(), t.size());
                (t.clone(), m)
            })
            .collect();
        Ok((acc, samples))
    })?;
    let mut acc = StatsAccumulator::default();
    let mut samples = Vec::new();
    for (a, s) in per_slide {
        acc.merge(&a);
        samples.extend(s);
    }
    let reference = acc.finish()?;
    let segmenter = Segmenter::train(
        &samples,
        &SegmenterConfig {
            seed: cfg.seed,
            ..SegmenterConfig::default()
        },
    )?;
    drop(samples);

    let mut bundle = ModelBundle {
        reference,
        lab: None,
        segmenter,
        classifier: NetParams::zeros(),
        thresholds: None,
    };
    let data = embeddings(&train, source, &bundle, cfg)?;
    if data.is_empty() {
        return Err(Error::invalid("no training slide produced an ROI"));
    }
    bundle.classifier = classifier::train(&data, &cfg.classifier)?;
    let train_accuracy = classifier::accuracy(&bundle.classifier, &data);

    let validation = validate(&bundle, validation, source, cfg)?;
    bundle.thresholds = Some(validation.thresholds.clone());
    Ok((
        bundle,
        TrainReport {
            train_slides: train.len(),
            train_embeddings: data.len(),
            train_accuracy,
            validation,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub finetune_slides: usize,
    pub finetune_embeddings: usize,
    pub validation: ValidationSummary,
}

/// Per-lab calibration: fit the lab's color statistics, fine-tune the
/// classifier on its fine-tuning split, and fix thresholds on its
/// validation split.
pub fn calibrate_lab(
    base: &ModelBundle,
    finetune: &[SlideRecord],
    validation: &[SlideRecord],
    source: &dyn SlideSource,
    cfg: &Config,
) -> Result<(ModelBundle, CalibrationReport)> {
    if finetune.is_empty() {
        return Err(Error::invalid("fine-tuning split is empty"));
    }
    if validation.is_empty() {
        return Err(Error::invalid("calibration validation split is empty"));
    }
    let finetune = sorted(finetune);
    let mut bundle = base.clone();
    bundle.lab = Some(domain_stats(&finetune, source, cfg)?.finish()?);
    bundle.thresholds = None;

    let data = embeddings(&finetune, source, &bundle, cfg)?;
    if data.is_empty() {
        return Err(Error::invalid("no fine-tuning slide produced an ROI"));
    }
    let tune = TrainConfig {
        epochs: cfg.finetune_epochs,
        ..cfg.classifier
    };
    bundle.classifier = classifier::fine_tune(&base.classifier, &data, &tune, cfg.finetune_lr_scale)?;

    let validation = validate(&bundle, validation, source, cfg)?;
    bundle.thresholds = Some(validation.thresholds.clone());
    Ok((
        bundle,
        CalibrationReport {
            finetune_slides: finetune.len(),
            finetune_embeddings: data.len(),
            validation,
        },
    ))
}

/// Adapted ROI-agnostic tile features of `records`, at most `per_slide`
/// tiles each, for domain-gap measurement.
pub fn tile_features(records: &[SlideRecord], source: &dyn SlideSource, bundle: &ModelBundle, cfg: &Config, per_slide: usize) -> Result<Vec<classifier::FeatureVector>> {
    let per = par_map(&sorted(records), cfg.workers, |r| {
        let raster = source.load(r)?;
        let tiles = prepared_tiles(&raster, &r.slide_id, &bundle.adapter(), cfg)?;
        let mut rng = rng_for(cfg.seed, &format!("gap-sample/{}", r.slide_id));
        let picks = rand::seq::index::sample(&mut rng, tiles.len(), per_slide.min(tiles.len()));
        Ok(picks.into_iter().map(|i| classifier::featurize(&tiles[i])).collect::<Vec<_>>())
    })?;
    Ok(per.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{build_splits_with, Split, SplitScheme};
    use crate::synth::{default_labs, generate_corpus_with, SlideGeometry};

    #[test]
    fn small_end_to_end_training_and_calibration() {
        let geom = SlideGeometry { height: 512, width: 768 };
        let labs = default_labs();
        let corpus = generate_corpus_with(24, &labs[..2], 1..=1, 7, geom).unwrap();
        let reference = corpus.manifest.filtered(|r| r.lab_id == "ref");
        let dev = build_splits_with(&reference, SplitScheme::Development, [0.7, 0.3, 0.0], 1).unwrap();
        let cfg = Config {
            classifier: TrainConfig {
                epochs: 150,
                ..TrainConfig::default()
            },
            finetune_epochs: 40,
            ..Config::default()
        };
        let train: Vec<SlideRecord> = dev.in_split(Split::Train).cloned().collect();
        let val: Vec<SlideRecord> = dev.in_split(Split::Validation).cloned().collect();
        let (bundle, report) = train_reference(&train, &val, &corpus, &cfg).unwrap();
        assert!(report.train_accuracy >= 0.9, "{report:?}");
        assert!(bundle.adapter().is_identity());
        let thresholds = bundle.thresholds.as_ref().unwrap();
        assert_eq!(thresholds.levels(), 3);

        let lab = corpus.manifest.filtered(|r| r.lab_id == "lab-a");
        let cal = build_splits_with(&lab, SplitScheme::Calibration, [0.6, 0.4, 0.0], 2).unwrap();
        let ft: Vec<SlideRecord> = cal.in_split(Split::CalibFinetune).cloned().collect();
        let cv: Vec<SlideRecord> = cal.in_split(Split::CalibValidation).cloned().collect();
        let (lab_bundle, lab_report) = calibrate_lab(&bundle, &ft, &cv, &corpus, &cfg).unwrap();
        assert!(!lab_bundle.adapter().is_identity());
        assert_eq!(lab_bundle.segmenter, bundle.segmenter);
        assert!(lab_report.validation.accuracy.is_finite());
        let again = calibrate_lab(&bundle, &ft, &cv, &corpus, &cfg).unwrap().0;
        assert_eq!(again, lab_bundle);
    }
}
