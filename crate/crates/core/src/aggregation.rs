//! Per-specimen collapse of slide results and final thresholding.

use std::fmt;

use crate::confidence::{apply_threshold, Decision, PredictionMatrix, Threshold};
use crate::error::{Error, Result};
use crate::label::ClassLabel;

#[derive(Debug, Clone, PartialEq)]
pub enum SlideOutcome {
    Classified {
        class: ClassLabel,
        score: f64,
        matrix: PredictionMatrix,
    },
    NoRoi,
    /// The slide could not be processed; it counts as having no ROI.
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideResult {
    pub slide_id: String,
    pub specimen_id: String,
    pub outcome: SlideOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpecimenOutcome {
    Classified {
        class: ClassLabel,
        score: f64,
        source_slide: String,
        /// Column means of the winning slide's prediction matrix.
        column_means: [f64; 4],
    },
    NoRoi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FinalOutcome {
    Classified,
    BelowThreshold,
    NoRoi,
}

impl FinalOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            FinalOutcome::Classified => "classified",
            FinalOutcome::BelowThreshold => "below_threshold",
            FinalOutcome::NoRoi => "no_roi",
        }
    }
}

impl fmt::Display for FinalOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecimenResult {
    pub specimen_id: String,
    pub outcome: SpecimenOutcome,
    /// Set by [`finalize`].
    pub final_outcome: Option<FinalOutcome>,
}

impl SpecimenResult {
    pub fn class(&self) -> Option<ClassLabel> {
        match &self.outcome {
            SpecimenOutcome::Classified { class, .. } => Some(*class),
            SpecimenOutcome::NoRoi => None,
        }
    }

    pub fn score(&self) -> Option<f64> {
        match &self.outcome {
            SpecimenOutcome::Classified { score, .. } => Some(*score),
            SpecimenOutcome::NoRoi => None,
        }
    }
}

/// Maximum-score slide wins; equal scores go to the smallest slide id.
/// A specimen with no classified slide (only NoROI or failed) is NoROI.
pub fn aggregate(slides: &[SlideResult]) -> Result<SpecimenResult> {
    let first = slides
        .first()
        .ok_or_else(|| Error::invalid("aggregation needs at least one slide result"))?;
    if let Some(other) = slides.iter().find(|s| s.specimen_id != first.specimen_id) {
        return Err(Error::invalid(format!(
            "slide {} belongs to specimen {}, expected {}",
            other.slide_id, other.specimen_id, first.specimen_id
        )));
    }
    let mut best: Option<(&SlideResult, ClassLabel, f64, &PredictionMatrix)> = None;
    for s in slides {
        if let SlideOutcome::Classified { class, score, matrix } = &s.outcome {
            let better = match best {
                None => true,
                Some((b, _, bs, _)) => *score > bs || (*score == bs && s.slide_id < b.slide_id),
            };
            if better {
                best = Some((s, *class, *score, matrix));
            }
        }
    }
    let outcome = match best {
        Some((s, class, score, matrix)) => SpecimenOutcome::Classified {
            class,
            score,
            source_slide: s.slide_id.clone(),
            column_means: matrix.column_means(),
        },
        None => SpecimenOutcome::NoRoi,
    };
    Ok(SpecimenResult {
        specimen_id: first.specimen_id.clone(),
        outcome,
        final_outcome: None,
    })
}

pub fn finalize(specimen: &SpecimenResult, threshold: Threshold) -> SpecimenResult {
    let final_outcome = match &specimen.outcome {
        SpecimenOutcome::NoRoi => FinalOutcome::NoRoi,
        SpecimenOutcome::Classified { score, .. } => match apply_threshold(*score, threshold) {
            Decision::Classified => FinalOutcome::Classified,
            Decision::BelowThreshold => FinalOutcome::BelowThreshold,
        },
    };
    SpecimenResult {
        final_outcome: Some(final_outcome),
        ..specimen.clone()
    }
}
