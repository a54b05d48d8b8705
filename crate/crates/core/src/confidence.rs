//! Repeated stochastic prediction, column-mean confidence scores and
//! threshold calibration against target accuracy levels.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::classifier::{predict, NetParams, Prediction, SlideEmbedding, StochasticMask};
use crate::error::{Error, Result};
use crate::label::{ClassLabel, N_CLASSES};
use crate::seed::rng_for;

pub const DEFAULT_T: usize = 30;
pub const DEFAULT_TARGETS: [f64; 3] = [0.90, 0.95, 0.98];
const THRESHOLDS_HEADER: &str = "wsi-triage-thresholds v1";

/// `T` rows of per-class sigmoid outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    rows: Vec<Prediction>,
}

impl PredictionMatrix {
    pub fn new(rows: Vec<Prediction>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("prediction matrix needs at least one row"));
        }
        if rows.iter().flatten().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
            return Err(Error::invalid("prediction matrix entries must lie in [0, 1]"));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Prediction] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_means(&self) -> Prediction {
        let mut m = [0.0; N_CLASSES];
        for row in &self.rows {
            for c in 0..N_CLASSES {
                m[c] += row[c];
            }
        }
        let t = self.rows.len() as f64;
        m.map(|v| v / t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceScore {
    pub value: f64,
    pub class: ClassLabel,
}

/// Repeats the masked forward pass `t` times. Masks come from a stream keyed
/// by `(seed, slide_id)` so the result is independent of scheduling.
pub fn mc_predict(
    embedding: &SlideEmbedding,
    params: &NetParams,
    t: usize,
    keep_prob: f64,
    seed: u64,
    slide_id: &str,
) -> Result<PredictionMatrix> {
    if t == 0 {
        return Err(Error::invalid("T must be at least 1"));
    }
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::invalid(format!("keep probability {keep_prob} outside (0, 1]")));
    }
    let mut rng = rng_for(seed, &format!("mc/{slide_id}"));
    let rows = (0..t)
        .map(|_| {
            let mask = StochasticMask::draw(&mut rng, keep_prob);
            predict(embedding, params, Some(&mask))
        })
        .collect();
    PredictionMatrix::new(rows)
}

/// Maximum column mean; ties go to the earlier class in canonical order.
pub fn score(matrix: &PredictionMatrix) -> ConfidenceScore {
    let means = matrix.column_means();
    let mut best = 0;
    for c in 1..N_CLASSES {
        if means[c] > means[best] {
            best = c;
        }
    }
    ConfidenceScore {
        value: means[best],
        class: ClassLabel::from_index(best).expect("class index in range"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Value(f64),
    Unreachable,
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Value(v) => write!(f, "{v}"),
            Threshold::Unreachable => f.write_str("unreachable"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Classified,
    BelowThreshold,
}

/// Inclusive: a score equal to the threshold is classified.
pub fn apply_threshold(score: f64, threshold: Threshold) -> Decision {
    match threshold {
        Threshold::Value(t) if score >= t => Decision::Classified,
        _ => Decision::BelowThreshold,
    }
}

/// Thresholds for confidence levels 1..=n, one per target accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    pub targets: Vec<f64>,
    pub thresholds: Vec<Threshold>,
}

impl ThresholdSet {
    /// `level` is 1-based.
    pub fn get(&self, level: usize) -> Option<Threshold> {
        level.checked_sub(1).and_then(|i| self.thresholds.get(i).copied())
    }

    pub fn levels(&self) -> usize {
        self.thresholds.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{THRESHOLDS_HEADER}\n");
        for (i, (t, th)) in self.targets.iter().zip(&self.thresholds).enumerate() {
            s += &format!("level {} target {t} threshold {th}\n", i + 1);
        }
        s
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == THRESHOLDS_HEADER => {}
            _ => return Err(Error::parse(name, 1, format!("expected header `{THRESHOLDS_HEADER}`"))),
        }
        let mut set = ThresholdSet {
            targets: Vec::new(),
            thresholds: Vec::new(),
        };
        for (i, line) in lines {
            let ln = i + 1;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::parse(name, ln, "expected `level <k> target <t> threshold <v|unreachable>`");
            if parts.len() != 6 || parts[0] != "level" || parts[2] != "target" || parts[4] != "threshold" {
                return Err(bad());
            }
            if parts[1].parse::<usize>().ok() != Some(set.targets.len() + 1) {
                return Err(Error::parse(name, ln, "levels must be numbered consecutively from 1"));
            }
            let target = parts[3].parse::<f64>().map_err(|_| bad())?;
            let threshold = match parts[5] {
                "unreachable" => Threshold::Unreachable,
                v => Threshold::Value(v.parse::<f64>().map_err(|_| bad())?),
            };
            set.targets.push(target);
            set.thresholds.push(threshold);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// For each target, the smallest candidate in `{0} ∪ {observed scores}` whose
/// retained set (score ≥ candidate) reaches the target accuracy.
pub fn calibrate_thresholds(results: &[(f64, bool)], targets: &[f64]) -> Result<ThresholdSet> {
    if results.is_empty() {
        return Err(Error::invalid("threshold calibration needs at least one validation result"));
    }
    if results.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::invalid("validation scores must be finite"));
    }
    let mut sorted: Vec<(f64, bool)> = results.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Retained set for candidate t is a prefix of the descending order; walk
    // candidates from high to low and keep (threshold, correct, retained).
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let (mut correct, mut retained) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            correct += usize::from(sorted[i].1);
            retained += 1;
            i += 1;
        }
        candidates.push((s, correct, retained));
    }
    if candidates.last().map(|c| c.0) != Some(0.0) {
        candidates.push((0.0, correct, retained));
    }
    candidates.retain(|c| c.0 >= 0.0);
    let thresholds = targets
        .iter()
        .map(|&target| {
            candidates
                .iter()
                .rev()
                .find(|&&(_, c, r)| r > 0 && c as f64 / r as f64 >= target)
                .map_or(Threshold::Unreachable, |&(t, _, _)| Threshold::Value(t))
        })
        .collect();
    Ok(ThresholdSet {
        targets: targets.to_vec(),
        thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_two_row_example() {
        let m = PredictionMatrix::new(vec![[0.6, 0.2, 0.1, 0.1], [0.8, 0.4, 0.3, 0.1]]).unwrap();
        let means = m.column_means();
        for (a, b) in means.iter().zip([0.7, 0.3, 0.2, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
        let s = score(&m);
        assert!((s.value - 0.7).abs() < 1e-12);
        assert_eq!(s.class, ClassLabel::Basaloid);
    }

    #[test]
    fn uniform_matrix_breaks_ties_canonically() {
        let m = PredictionMatrix::new(vec![[0.5; 4]; 3]).unwrap();
        assert_eq!(score(&m), ConfidenceScore { value: 0.5, class: ClassLabel::Basaloid });
        let m = PredictionMatrix::new(vec![[0.1, 0.6, 0.6, 0.6]]).unwrap();
        assert_eq!(score(&m).class, ClassLabel::Squamous);
    }

    #[test]
    fn mc_predict_properties() {
        let params = NetParams::init(4);
        let x = [0.05; 64];
        let det = mc_predict(&x, &params, 7, 1.0, 1, "s").unwrap();
        let plain = predict(&x, &params, None);
        assert!(det.rows().iter().all(|r| *r == plain));
        let a = mc_predict(&x, &params, 30, 0.3, 1, "s").unwrap();
        assert_eq!(a, mc_predict(&x, &params, 30, 0.3, 1, "s").unwrap());
        assert_eq!(a.len(), 30);
        assert_ne!(a, mc_predict(&x, &params, 30, 0.3, 1, "other").unwrap());
        let one = mc_predict(&x, &params, 1, 0.3, 1, "s").unwrap();
        assert_eq!(one.rows()[0], a.rows()[0]);
        assert!(mc_predict(&x, &params, 0, 0.3, 1, "s").is_err());
        assert!(mc_predict(&x, &params, 3, 0.0, 1, "s").is_err());
    }

    #[test]
    fn worked_calibration_example() {
        let results = [(0.2, false), (0.4, true), (0.6, false), (0.8, true), (0.9, true)];
        let set = calibrate_thresholds(&results, &[0.90]).unwrap();
        assert_eq!(set.thresholds, vec![Threshold::Value(0.8)]);
    }

    #[test]
    fn all_correct_and_all_wrong() {
        let right = [(0.3, true), (0.7, true)];
        let set = calibrate_thresholds(&right, &DEFAULT_TARGETS).unwrap();
        assert!(set.thresholds.iter().all(|t| *t == Threshold::Value(0.0)));
        let wrong = [(0.3, false), (0.7, false)];
        let set = calibrate_thresholds(&wrong, &DEFAULT_TARGETS).unwrap();
        assert!(set.thresholds.iter().all(|t| *t == Threshold::Unreachable));
        assert!(calibrate_thresholds(&[], &DEFAULT_TARGETS).is_err());
    }

    #[test]
    fn boundary_is_inclusive() {
        assert_eq!(apply_threshold(0.33, Threshold::Value(0.33)), Decision::Classified);
        assert_eq!(apply_threshold(0.329, Threshold::Value(0.33)), Decision::BelowThreshold);
        assert_eq!(apply_threshold(1.0, Threshold::Unreachable), Decision::BelowThreshold);
    }

    #[test]
    fn threshold_set_round_trips() {
        let set = ThresholdSet {
            targets: DEFAULT_TARGETS.to_vec(),
            thresholds: vec![Threshold::Value(0.0), Threshold::Value(0.7612345678901234), Threshold::Unreachable],
        };
        assert_eq!(ThresholdSet::parse(&set.to_text(), "t").unwrap(), set);
        assert_eq!(set.get(2), Some(Threshold::Value(0.7612345678901234)));
        assert_eq!(set.get(0), None);
    }

    fn brute_accuracy(results: &[(f64, bool)], t: f64) -> Option<f64> {
        let kept: Vec<_> = results.iter().filter(|(s, _)| *s >= t).collect();
        if kept.is_empty() {
            None
        } else {
            Some(kept.iter().filter(|(_, c)| *c).count() as f64 / kept.len() as f64)
        }
    }

    fn results_strategy() -> impl Strategy<Value = Vec<(f64, bool)>> {
        proptest::collection::vec(((0u32..20).prop_map(|v| f64::from(v) / 20.0), any::<bool>()), 1..40)
    }

    proptest! {
        #[test]
        fn score_matches_brute_force(rows in proptest::collection::vec(proptest::array::uniform4(0.001f64..0.999), 1..40)) {
            let m = PredictionMatrix::new(rows.clone()).unwrap();
            let s = score(&m);
            let t = rows.len() as f64;
            let means: Vec<f64> = (0..4).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / t).collect();
            let max = means.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!((s.value - max).abs() < 1e-12);
            let mut perm = rows.clone();
            perm.reverse();
            let s2 = score(&PredictionMatrix::new(perm).unwrap());
            prop_assert!((s2.value - s.value).abs() < 1e-12);
            prop_assert_eq!(s2.class, s.class);
        }

        #[test]
        fn chosen_thresholds_meet_target_and_are_minimal(results in results_strategy(), target in 0.5f64..1.0) {
            let set = calibrate_thresholds(&results, &[target]).unwrap();
            let mut candidates: Vec<f64> = results.iter().map(|r| r.0).chain([0.0]).collect();
            candidates.sort_by(f64::total_cmp);
            candidates.dedup();
            match set.thresholds[0] {
                Threshold::Value(t) => {
                    prop_assert!(brute_accuracy(&results, t).unwrap() >= target);
                    for c in candidates.iter().filter(|c| **c < t) {
                        prop_assert!(brute_accuracy(&results, *c).is_none_or(|a| a < target));
                    }
                }
                Threshold::Unreachable => {
                    for c in &candidates {
                        prop_assert!(brute_accuracy(&results, *c).is_none_or(|a| a < target));
                    }
                }
            }
        }

        #[test]
        fn raising_threshold_never_retains_more(results in results_strategy(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = (a.min(b), a.max(b));
            let count = |t: f64| results.iter().filter(|(s, _)| apply_threshold(*s, Threshold::Value(t)) == Decision::Classified).count();
            prop_assert!(count(hi) <= count(lo));
        }
    }
}
