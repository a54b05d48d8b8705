//! Selective-classification metrics: accuracy and coverage per confidence
//! level, one-vs-rest ROC curves, confusion counts with abstention columns,
//! and a silhouette-based measure of how strongly features cluster by lab.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::aggregation::{finalize, FinalOutcome, SpecimenOutcome, SpecimenResult};
use crate::confidence::{Threshold, ThresholdSet};
use crate::error::{Error, Result};
use crate::label::{ClassLabel, N_CLASSES};

/// Confusion columns: the four predicted classes, then below-threshold, then no-ROI.
pub const N_CONFUSION_COLS: usize = N_CLASSES + 2;
pub const COL_BELOW: usize = N_CLASSES;
pub const COL_NO_ROI: usize = N_CLASSES + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// (false-positive rate, true-positive rate), from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Sweeps every distinct score as a threshold; tied scores move together,
/// which counts ties as half in the area.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<RocCurve> {
    if scores.len() != positives.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!("{n_pos} positives and {n_neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x0, y0) = *points.last().expect("non-empty");
        let (x1, y1) = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
    }
    Ok(RocCurve { points, auc })
}

/// `None` is the unthresholded level; `Some(k)` is confidence level k.
pub type Level = Option<usize>;

pub fn level_name(level: Level) -> String {
    level.map_or_else(|| "none".to_string(), |k| k.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelReport {
    pub level: Level,
    pub threshold: Option<Threshold>,
    pub total: usize,
    pub retained: usize,
    pub correct: usize,
    /// Correct over retained; NaN when nothing is retained.
    pub accuracy: f64,
    pub coverage: f64,
    /// One-vs-rest AUC over retained specimens; `None` when a class has no
    /// positives or no negatives among them.
    pub auc: [Option<f64>; N_CLASSES],
    pub roc: [Option<RocCurve>; N_CLASSES],
    /// Rows are truth classes.
    pub confusion: [[usize; N_CONFUSION_COLS]; N_CLASSES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub levels: Vec<LevelReport>,
}

impl EvalReport {
    pub fn level(&self, level: Level) -> Option<&LevelReport> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("wsi-triage-report v1\n");
        for l in &self.levels {
            let _ = writeln!(
                s,
                "level {} threshold {} total {} retained {} correct {} accuracy {} coverage {}",
                level_name(l.level),
                l.threshold.map_or_else(|| "-".to_string(), |t| t.to_string()),
                l.total,
                l.retained,
                l.correct,
                l.accuracy,
                l.coverage
            );
            for c in ClassLabel::ALL {
                let _ = writeln!(
                    s,
                    "  auc {} {}",
                    c,
                    l.auc[c.index()].map_or_else(|| "NaN".to_string(), |v| v.to_string())
                );
            }
        }
        s
    }

    pub fn levels_csv(&self) -> String {
        let mut s = String::from("level,threshold,total,retained,correct,accuracy,coverage,auc_basaloid,auc_squamous,auc_melanocytic,auc_other\n");
        for l in &self.levels {
            let aucs: Vec<String> = l.auc.iter().map(|a| a.map_or_else(|| "NaN".to_string(), |v| v.to_string())).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                level_name(l.level),
                l.threshold.map_or_else(|| "-".to_string(), |t| t.to_string()),
                l.total,
                l.retained,
                l.correct,
                l.accuracy,
                l.coverage,
                aucs.join(",")
            );
        }
        s
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("level,truth,basaloid,squamous,melanocytic,other,below_threshold,no_roi\n");
        for l in &self.levels {
            for c in ClassLabel::ALL {
                let row: Vec<String> = l.confusion[c.index()].iter().map(|v| v.to_string()).collect();
                let _ = writeln!(s, "{},{},{}", level_name(l.level), c, row.join(","));
            }
        }
        s
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("level,class,fpr,tpr\n");
        for l in &self.levels {
            for c in ClassLabel::ALL {
                if let Some(curve) = &l.roc[c.index()] {
                    for (x, y) in &curve.points {
                        let _ = writeln!(s, "{},{},{},{}", level_name(l.level), c, x, y);
                    }
                }
            }
        }
        s
    }
}

fn level_report(specimens: &[(&SpecimenResult, ClassLabel)], level: Level, threshold: Option<Threshold>) -> LevelReport {
    let mut confusion = [[0usize; N_CONFUSION_COLS]; N_CLASSES];
    let (mut retained, mut correct) = (0usize, 0usize);
    let mut kept: Vec<([f64; N_CLASSES], ClassLabel)> = Vec::new();
    for (spec, truth) in specimens {
        let fin = finalize(spec, threshold.unwrap_or(Threshold::Value(f64::NEG_INFINITY)));
        let col = match (fin.final_outcome, &spec.outcome) {
            (Some(FinalOutcome::Classified), SpecimenOutcome::Classified { class, column_means, .. }) => {
                retained += 1;
                correct += usize::from(class == truth);
                kept.push((*column_means, *truth));
                class.index()
            }
            (Some(FinalOutcome::NoRoi), _) | (_, SpecimenOutcome::NoRoi) => COL_NO_ROI,
            _ => COL_BELOW,
        };
        confusion[truth.index()][col] += 1;
    }
    let mut auc = [None; N_CLASSES];
    let mut roc: [Option<RocCurve>; N_CLASSES] = Default::default();
    for c in ClassLabel::ALL {
        let scores: Vec<f64> = kept.iter().map(|(m, _)| m[c.index()]).collect();
        let pos: Vec<bool> = kept.iter().map(|(_, t)| *t == c).collect();
        if let Ok(curve) = roc_auc(&scores, &pos) {
            auc[c.index()] = Some(curve.auc);
            roc[c.index()] = Some(curve);
        }
    }
    let total = specimens.len();
    LevelReport {
        level,
        threshold,
        total,
        retained,
        correct,
        accuracy: if retained == 0 { f64::NAN } else { correct as f64 / retained as f64 },
        coverage: if total == 0 { f64::NAN } else { retained as f64 / total as f64 },
        auc,
        roc,
        confusion,
    }
}

/// Metrics at the unthresholded level and at each calibrated level.
pub fn evaluate(
    specimens: &[SpecimenResult],
    truths: &BTreeMap<String, ClassLabel>,
    thresholds: &ThresholdSet,
) -> Result<EvalReport> {
    let mut labelled = Vec::with_capacity(specimens.len());
    for s in specimens {
        let truth = truths
            .get(&s.specimen_id)
            .ok_or_else(|| Error::invalid(format!("specimen {} has no truth label", s.specimen_id)))?;
        labelled.push((s, *truth));
    }
    let mut levels = vec![level_report(&labelled, None, None)];
    for k in 1..=thresholds.levels() {
        levels.push(level_report(&labelled, Some(k), thresholds.get(k)));
    }
    Ok(EvalReport { levels })
}

/// Mean silhouette coefficient with lab labels as clusters (Euclidean).
/// A point alone in its cluster contributes 0.
pub fn domain_gap<V: AsRef<[f64]>>(features: &[V], labs: &[String]) -> Result<f64> {
    if features.len() != labs.len() {
        return Err(Error::invalid("features and lab labels differ in length"));
    }
    let mut clusters: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labs.iter().enumerate() {
        clusters.entry(l.as_str()).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(Error::invalid("domain gap needs at least two labs"));
    }
    if let Some((lab, _)) = clusters.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::invalid(format!("lab {lab} has fewer than two feature vectors")));
    }
    let dist = |a: usize, b: usize| -> f64 {
        features[a]
            .as_ref()
            .iter()
            .zip(features[b].as_ref())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for (lab, members) in &clusters {
        for &i in members {
            let a = members.iter().filter(|&&j| j != i).map(|&j| dist(i, j)).sum::<f64>() / (members.len() - 1) as f64;
            let b = clusters
                .iter()
                .filter(|(other, _)| *other != lab)
                .map(|(_, m)| m.iter().map(|&j| dist(i, j)).sum::<f64>() / m.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
        }
    }
    Ok(total / features.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mann_whitney(scores: &[f64], pos: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn separated_and_constant_scores() {
        let pos = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &pos).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &pos).unwrap().auc, 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedAuc(_))));
    }

    #[test]
    fn curve_is_monotone_with_fixed_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..50).map(|_| f64::from(rng.gen_range(0..10u8)) / 10.0).collect();
        let pos: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let c = roc_auc(&scores, &pos).unwrap();
        assert_eq!(c.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(c.points.last(), Some(&(1.0, 1.0)));
        assert!(c.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
    }

    fn specimen(id: &str, class: Option<ClassLabel>, score: f64) -> SpecimenResult {
        let outcome = match class {
            Some(class) => {
                let mut m = [(1.0 - score) / 3.0; 4];
                m[class.index()] = score;
                SpecimenOutcome::Classified {
                    class,
                    score,
                    source_slide: format!("{id}-w0"),
                    column_means: m,
                }
            }
            None => SpecimenOutcome::NoRoi,
        };
        SpecimenResult {
            specimen_id: id.into(),
            outcome,
            final_outcome: None,
        }
    }

    fn thresholds(v: [Threshold; 3]) -> ThresholdSet {
        ThresholdSet {
            targets: vec![0.9, 0.95, 0.98],
            thresholds: v.to_vec(),
        }
    }

    #[test]
    fn all_correct_at_zero_threshold() {
        let specs: Vec<_> = (0..8).map(|i| specimen(&format!("s{i}"), ClassLabel::from_index(i % 4), 0.8)).collect();
        let truths = (0..8).map(|i| (format!("s{i}"), ClassLabel::from_index(i % 4).unwrap())).collect();
        let r = evaluate(&specs, &truths, &thresholds([Threshold::Value(0.0); 3])).unwrap();
        for l in &r.levels {
            assert_eq!(l.accuracy, 1.0);
            assert_eq!(l.coverage, 1.0);
        }
        assert_eq!(r.level(None).unwrap().auc, [Some(1.0); 4]);
    }

    #[test]
    fn unreachable_levels_have_zero_coverage_and_undefined_accuracy() {
        let specs = vec![specimen("a", Some(ClassLabel::Other), 0.9)];
        let truths = [("a".to_string(), ClassLabel::Other)].into();
        let r = evaluate(&specs, &truths, &thresholds([Threshold::Unreachable; 3])).unwrap();
        let l1 = r.level(Some(1)).unwrap();
        assert_eq!(l1.coverage, 0.0);
        assert!(l1.accuracy.is_nan());
        assert_eq!(l1.confusion[ClassLabel::Other.index()][COL_BELOW], 1);
    }

    #[test]
    fn unknown_specimen_is_rejected() {
        let specs = vec![specimen("a", Some(ClassLabel::Other), 0.9)];
        assert!(evaluate(&specs, &BTreeMap::new(), &thresholds([Threshold::Unreachable; 3])).is_err());
    }

    #[test]
    fn hand_planted_fixture_matches_manual_tally() {
        // 40 specimens, 10 per truth class. Within each class: 6 correct at
        // 0.9, 2 confused with the next class at 0.55, 1 correct at 0.5,
        // 1 with no ROI.
        let mut specs = Vec::new();
        let mut truths = BTreeMap::new();
        for t in ClassLabel::ALL {
            let wrong = ClassLabel::from_index((t.index() + 1) % 4).unwrap();
            for i in 0..10 {
                let id = format!("{t}-{i}");
                let s = match i {
                    0..=5 => specimen(&id, Some(t), 0.9),
                    6 | 7 => specimen(&id, Some(wrong), 0.55),
                    8 => specimen(&id, Some(t), 0.5),
                    _ => specimen(&id, None, 0.0),
                };
                specs.push(s);
                truths.insert(id, t);
            }
        }
        let set = thresholds([Threshold::Value(0.5), Threshold::Value(0.6), Threshold::Unreachable]);
        let r = evaluate(&specs, &truths, &set).unwrap();
        let none = r.level(None).unwrap();
        for t in ClassLabel::ALL {
            let row = none.confusion[t.index()];
            assert_eq!(row[t.index()], 7);
            assert_eq!(row[(t.index() + 1) % 4], 2);
            assert_eq!(row[COL_BELOW], 0);
            assert_eq!(row[COL_NO_ROI], 1);
        }
        assert_eq!((none.retained, none.correct), (36, 28));
        let l2 = r.level(Some(2)).unwrap();
        for t in ClassLabel::ALL {
            let row = l2.confusion[t.index()];
            assert_eq!(row[t.index()], 6);
            assert_eq!(row[COL_BELOW], 3);
            assert_eq!(row[COL_NO_ROI], 1);
        }
        assert_eq!(l2.accuracy, 1.0);
        assert_eq!(l2.coverage, 24.0 / 40.0);
        let l3 = r.level(Some(3)).unwrap();
        assert_eq!(l3.retained, 0);
        for l in &r.levels {
            for t in ClassLabel::ALL {
                assert_eq!(l.confusion[t.index()].iter().sum::<usize>(), 10);
            }
        }
    }

    #[test]
    fn silhouette_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut feats = Vec::new();
        let mut labs = Vec::new();
        for lab in ["a", "b"] {
            for _ in 0..60 {
                feats.push(vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]);
                labs.push(lab.to_string());
            }
        }
        assert!(domain_gap(&feats, &labs).unwrap().abs() < 0.1);
        let far: Vec<Vec<f64>> = feats
            .iter()
            .zip(&labs)
            .map(|(f, l)| if l == "a" { f.clone() } else { vec![f[0] + 100.0, f[1]] })
            .collect();
        assert!(domain_gap(&far, &labs).unwrap() > 0.9);
        let single = vec![vec![0.0], vec![1.0]];
        assert!(domain_gap(&single, &["a".to_string(), "b".to_string()]).is_err());
        assert!(domain_gap(&feats, &vec!["a".to_string(); feats.len()]).is_err());
    }

    proptest! {
        #[test]
        fn trapezoid_equals_pairwise_statistic(raw in proptest::collection::vec((0u8..8, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = raw.iter().map(|r| f64::from(r.0) / 8.0).collect();
            let pos: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let auc = roc_auc(&scores, &pos).unwrap().auc;
            prop_assert!((auc - mann_whitney(&scores, &pos)).abs() < 1e-9);
            // strictly monotone transform leaves the area unchanged
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((roc_auc(&warped, &pos).unwrap().auc - auc).abs() < 1e-12);
        }
    }
}
