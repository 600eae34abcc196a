//! Dataset manifests: which cases exist, where their images live, and how
//! they are split.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CaseImages;
use crate::error::{Error, Result};
use crate::tensor::oxt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tissue {
    PorcineBowel,
    LambUterus,
    RabbitUterus,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub case_id: String,
    pub tissue: Tissue,
    /// OXT1 file holding a 3×H×W RGB image in [0, 1], relative to the
    /// manifest's directory.
    pub rgb_path: PathBuf,
    /// OXT1 file holding a 1×H×W StO₂ map in [0, 1].
    pub sto2_path: PathBuf,
    pub split: Split,
}

/// How the data was produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub provenance: Provenance,
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    /// Rejects duplicate case ids and splits without train or test cases.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.cases {
            if !seen.insert(c.case_id.as_str()) {
                return Err(Error::Data(format!("duplicate case_id {:?}", c.case_id)));
            }
        }
        for split in [Split::Train, Split::Test] {
            if !self.cases.iter().any(|c| c.split == split) {
                return Err(Error::Data(format!("manifest has no {split:?} cases").to_lowercase()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate()?;
        Ok(m)
    }

    /// Loads and validates a manifest, checking that every referenced file
    /// exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io("reading manifest", path, e))?;
        let m = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for c in &m.cases {
            for p in [&c.rgb_path, &c.sto2_path] {
                if !base.join(p).is_file() {
                    return Err(Error::Data(format!("case {}: missing file {}", c.case_id, base.join(p).display())));
                }
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io("writing manifest", path, e))
    }

    /// Reads every case's images, resolving paths against `base`.
    pub fn load_images(&self, base: &Path) -> Result<Vec<CaseImages>> {
        self.cases
            .iter()
            .map(|c| {
                let rgb = oxt::load(base.join(&c.rgb_path))?;
                let sto2 = oxt::load(base.join(&c.sto2_path))?;
                let in_range = |t: &crate::Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
                if !in_range(&rgb) || !in_range(&sto2) {
                    return Err(Error::Data(format!("case {}: image values outside [0, 1]", c.case_id)));
                }
                Ok(CaseImages {
                    case_id: c.case_id.clone(),
                    tissue: c.tissue,
                    split: c.split,
                    sto2,
                    rgb,
                })
            })
            .collect()
    }
}

/// Default train fraction: 167 of 222 cases.
pub const DEFAULT_TRAIN_RATIO: f64 = 167.0 / 222.0;

/// Train and test case counts for `n` cases: `round(n · ratio)` train cases,
/// clamped so each side keeps at least one case.
pub fn split_counts(n: usize, train_ratio: f64) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 cases to split, got {n}")));
    }
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Config(format!("train ratio {train_ratio} must lie in (0, 1)")));
    }
    let train = ((n as f64 * train_ratio).round() as usize).clamp(1, n - 1);
    Ok((train, n - train))
}
