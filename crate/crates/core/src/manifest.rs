//! Slide records, dataset manifests and specimen-grouped split assignment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::ClassLabel;

pub const MANIFEST_HEADER: &str = "wsi-triage-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
    CalibFinetune,
    CalibValidation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::CalibFinetune => "calib_finetune",
            Split::CalibValidation => "calib_validation",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "calib_finetune" => Ok(Split::CalibFinetune),
            "calib_validation" => Ok(Split::CalibValidation),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// Which three splits a ratio triple maps onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitScheme {
    /// Train / Validation / Test, used for the reference lab.
    Development,
    /// CalibFinetune / CalibValidation / Test, used for each additional lab.
    Calibration,
}

impl SplitScheme {
    pub fn splits(self) -> [Split; 3] {
        match self {
            SplitScheme::Development => [Split::Train, Split::Validation, Split::Test],
            SplitScheme::Calibration => [Split::CalibFinetune, Split::CalibValidation, Split::Test],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub specimen_id: String,
    pub lab_id: String,
    pub truth: ClassLabel,
    pub raster_path: PathBuf,
}

/// Ordered slide records plus their split assignment.
///
/// Records are kept sorted by `slide_id`; every specimen has a single truth
/// label and lab, and all of its slides share one split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<SlideRecord>,
    splits: BTreeMap<String, Split>,
}

fn check_field(name: &str, value: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::invalid(format!("empty {name}")));
    }
    if value.contains([',', '\n', '\r']) {
        return Err(Error::invalid(format!("{name} `{value}` contains a separator")));
    }
    Ok(())
}

impl DatasetManifest {
    pub fn new(mut records: Vec<SlideRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
        for pair in records.windows(2) {
            if pair[0].slide_id == pair[1].slide_id {
                return Err(Error::invalid(format!("duplicate slide_id `{}`", pair[0].slide_id)));
            }
        }
        let mut specimen_info: BTreeMap<&str, (&str, ClassLabel)> = BTreeMap::new();
        for r in &records {
            check_field("slide_id", &r.slide_id)?;
            check_field("specimen_id", &r.specimen_id)?;
            check_field("lab_id", &r.lab_id)?;
            let entry = specimen_info
                .entry(&r.specimen_id)
                .or_insert((&r.lab_id, r.truth));
            if *entry != (r.lab_id.as_str(), r.truth) {
                return Err(Error::invalid(format!(
                    "specimen `{}` has slides with differing lab or truth",
                    r.specimen_id
                )));
            }
        }
        Ok(Self {
            records,
            splits: BTreeMap::new(),
        })
    }

    pub fn records(&self) -> &[SlideRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, slide_id: &str) -> Option<&SlideRecord> {
        self.records
            .binary_search_by(|r| r.slide_id.as_str().cmp(slide_id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn split_of(&self, slide_id: &str) -> Option<Split> {
        self.splits.get(slide_id).copied()
    }

    /// Assigns `split` to every slide of `specimen_id`.
    pub fn assign_specimen(&mut self, specimen_id: &str, split: Split) {
        for r in self.records.iter().filter(|r| r.specimen_id == specimen_id) {
            self.splits.insert(r.slide_id.clone(), split);
        }
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &SlideRecord> {
        self.records
            .iter()
            .filter(move |r| self.splits.get(&r.slide_id) == Some(&split))
    }

    pub fn in_lab<'a>(&'a self, lab_id: &'a str) -> impl Iterator<Item = &'a SlideRecord> {
        self.records.iter().filter(move |r| r.lab_id == lab_id)
    }

    pub fn labs(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.lab_id.as_str()).collect()
    }

    pub fn specimen_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.specimen_id.as_str()).collect()
    }

    /// Specimen id -> truth label.
    pub fn specimen_truths(&self) -> BTreeMap<String, ClassLabel> {
        self.records
            .iter()
            .map(|r| (r.specimen_id.clone(), r.truth))
            .collect()
    }

    /// Keeps only records matching `keep`, preserving split assignments.
    pub fn filtered(&self, keep: impl Fn(&SlideRecord) -> bool) -> DatasetManifest {
        let records: Vec<SlideRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let splits = records
            .iter()
            .filter_map(|r| self.splits.get(&r.slide_id).map(|s| (r.slide_id.clone(), *s)))
            .collect();
        DatasetManifest { records, splits }
    }

    /// Concatenates two manifests with disjoint slide ids.
    pub fn merged(&self, other: &DatasetManifest) -> Result<DatasetManifest> {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        let mut merged = DatasetManifest::new(records)?;
        merged.splits = self.splits.clone();
        merged.splits.extend(other.splits.iter().map(|(k, v)| (k.clone(), *v)));
        merged.check_split_grouping()?;
        Ok(merged)
    }

    fn check_split_grouping(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Option<Split>> = BTreeMap::new();
        for r in &self.records {
            let split = self.splits.get(&r.slide_id).copied();
            match seen.get(r.specimen_id.as_str()) {
                Some(prev) if *prev != split => {
                    return Err(Error::invalid(format!(
                        "specimen `{}` is split across sets",
                        r.specimen_id
                    )))
                }
                _ => {
                    seen.insert(&r.specimen_id, split);
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let path = r.raster_path.to_string_lossy();
            if path.contains(['\n', '\r']) {
                return Err(Error::invalid(format!("raster path for `{}` contains a newline", r.slide_id)));
            }
            let split = self
                .splits
                .get(&r.slide_id)
                .map(|s| s.as_str())
                .unwrap_or("-");
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.slide_id, r.specimen_id, r.lab_id, r.truth, split, path
            ));
        }
        Ok(out)
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            Some((_, h)) => {
                return Err(Error::parse(source_name, 1, format!("expected header `{MANIFEST_HEADER}`, found `{h}`")))
            }
            None => return Err(Error::parse(source_name, 1, "missing header")),
        }
        let mut records = Vec::new();
        let mut splits = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.splitn(6, ',').collect();
            if fields.len() != 6 {
                return Err(Error::parse(source_name, lineno, format!("expected 6 fields, found {}", fields.len())));
            }
            let truth: ClassLabel = fields[3]
                .parse()
                .map_err(|e: Error| Error::parse(source_name, lineno, e.to_string()))?;
            let slide_id = fields[0].to_string();
            if !seen.insert(slide_id.clone()) {
                return Err(Error::parse(source_name, lineno, format!("duplicate slide_id `{slide_id}`")));
            }
            if fields[4] != "-" {
                let split: Split = fields[4]
                    .parse()
                    .map_err(|e: Error| Error::parse(source_name, lineno, e.to_string()))?;
                splits.insert(slide_id.clone(), split);
            }
            records.push(SlideRecord {
                slide_id,
                specimen_id: fields[1].to_string(),
                lab_id: fields[2].to_string(),
                truth,
                raster_path: PathBuf::from(fields[5]),
            });
        }
        let mut manifest =
            DatasetManifest::new(records).map_err(|e| Error::parse(source_name, 0, e.to_string()))?;
        manifest.splits = splits;
        manifest
            .check_split_grouping()
            .map_err(|e| Error::parse(source_name, 0, e.to_string()))?;
        Ok(manifest)
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = manifest.to_text()?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::parse(&text, &path.display().to_string())
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::invalid(format!("split ratios must be non-negative, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("split ratios must sum to 1, got {total}")));
    }
    Ok(())
}

/// Boundary indices over `n` shuffled specimens: floor of the cumulative ratio.
pub fn split_boundaries(n: usize, ratios: [f64; 3]) -> (usize, usize) {
    let first = ((ratios[0] * n as f64) + 1e-9).floor() as usize;
    let second = (((ratios[0] + ratios[1]) * n as f64) + 1e-9).floor() as usize;
    (first.min(n), second.min(n).max(first.min(n)))
}

/// Development split (Train / Validation / Test) by specimen.
pub fn build_splits(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    build_splits_with(manifest, SplitScheme::Development, ratios, seed)
}

/// Shuffles the sorted specimen id set with a seeded RNG and cuts it at the
/// floored cumulative ratio boundaries. The result depends only on the set
/// of specimen ids, the ratios and the seed.
pub fn build_splits_with(
    manifest: &DatasetManifest,
    scheme: SplitScheme,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetManifest> {
    if manifest.is_empty() {
        return Err(Error::invalid("cannot split an empty manifest"));
    }
    check_ratios(ratios)?;
    let mut specimens: Vec<&str> = manifest.specimen_ids().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specimens.shuffle(&mut rng);
    let (b1, b2) = split_boundaries(specimens.len(), ratios);
    let targets = scheme.splits();
    let assignment: BTreeMap<&str, Split> = specimens
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let split = if i < b1 {
                targets[0]
            } else if i < b2 {
                targets[1]
            } else {
                targets[2]
            };
            (*s, split)
        })
        .collect();
    let mut out = manifest.clone();
    out.splits = manifest
        .records
        .iter()
        .map(|r| (r.slide_id.clone(), assignment[r.specimen_id.as_str()]))
        .collect();
    Ok(out)
}
