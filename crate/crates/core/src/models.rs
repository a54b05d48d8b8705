//! A directory of trained model files used together by a run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::adaptation::{AdapterModel, DomainStats};
use crate::classifier::NetParams;
use crate::confidence::ThresholdSet;
use crate::error::{Error, Result};
use crate::roi::Segmenter;

pub const REFERENCE_STATS_FILE: &str = "reference_stats.txt";
pub const LAB_STATS_FILE: &str = "lab_stats.txt";
pub const SEGMENTER_FILE: &str = "segmenter.txt";
pub const CLASSIFIER_FILE: &str = "classifier.txt";
pub const THRESHOLDS_FILE: &str = "thresholds.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub reference: DomainStats,
    /// Source statistics of the lab this bundle was calibrated for; absent
    /// for the reference bundle, whose adapter is the identity.
    pub lab: Option<DomainStats>,
    pub segmenter: Segmenter,
    pub classifier: NetParams,
    pub thresholds: Option<ThresholdSet>,
}

impl ModelBundle {
    pub fn adapter(&self) -> AdapterModel {
        AdapterModel::new(self.lab.unwrap_or(self.reference), self.reference)
    }

    fn files(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![(REFERENCE_STATS_FILE, self.reference.to_text())];
        if let Some(lab) = &self.lab {
            out.push((LAB_STATS_FILE, lab.to_text()));
        }
        out.push((SEGMENTER_FILE, self.segmenter.to_text()));
        out.push((CLASSIFIER_FILE, self.classifier.to_text()));
        if let Some(t) = &self.thresholds {
            out.push((THRESHOLDS_FILE, t.to_text()));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in self.files() {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let optional = |name: &str| dir.join(name).exists().then(|| dir.join(name));
        Ok(Self {
            reference: DomainStats::load(&dir.join(REFERENCE_STATS_FILE))?,
            lab: optional(LAB_STATS_FILE).map(|p| DomainStats::load(&p)).transpose()?,
            segmenter: Segmenter::load(&dir.join(SEGMENTER_FILE))?,
            classifier: NetParams::load(&dir.join(CLASSIFIER_FILE))?,
            thresholds: optional(THRESHOLDS_FILE).map(|p| ThresholdSet::load(&p)).transpose()?,
        })
    }

    /// SHA-256 of each model file's serialized form.
    pub fn hashes(&self) -> BTreeMap<&'static str, String> {
        self.files().into_iter().map(|(n, t)| (n, sha256_hex(t.as_bytes()))).collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
