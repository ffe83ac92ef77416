//! Dataset manifests: the case inventory plus the fold assignment.
//!
//! On-disk form is a single JSON document:
//! `{"cases": [{"case_id", "dwi", "adc", "flair"?, "label"?}], "folds": {case_id: fold}}`.
//! Relative paths are resolved against the manifest's directory at load time.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub case_id: String,
    pub dwi: PathBuf,
    pub adc: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flair: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

impl CaseRecord {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub cases: Vec<CaseRecord>,
    /// case_id -> fold index; empty until a split has been made.
    #[serde(default)]
    pub folds: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn new(cases: Vec<CaseRecord>) -> Self {
        DatasetManifest {
            cases,
            folds: BTreeMap::new(),
        }
    }

    pub fn case(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == id)
    }

    pub fn labeled_cases(&self) -> impl Iterator<Item = &CaseRecord> {
        self.cases.iter().filter(|c| c.is_labeled())
    }

    pub fn num_folds(&self) -> usize {
        self.folds.values().max().map(|m| m + 1).unwrap_or(0)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let k = self.num_folds();
        let mut sizes = vec![0usize; k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Labeled cases outside `fold` (train) and inside it (validation).
    pub fn train_val_split(&self, fold: usize) -> (Vec<&CaseRecord>, Vec<&CaseRecord>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for case in self.labeled_cases() {
            match self.folds.get(&case.case_id) {
                Some(&f) if f == fold => val.push(case),
                Some(_) => train.push(case),
                None => {}
            }
        }
        (train, val)
    }

    /// Structural invariants: unique ids, folds partition the labeled set,
    /// fold sizes balanced within one.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for case in &self.cases {
            if !seen.insert(case.case_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate case_id \"{}\"",
                    case.case_id
                )));
            }
        }
        if self.folds.is_empty() {
            return Ok(());
        }
        for id in self.folds.keys() {
            if !seen.contains(id.as_str()) {
                return Err(Error::Validation(format!(
                    "fold assignment references unknown case_id \"{id}\""
                )));
            }
        }
        let labeled: HashSet<&str> = self.labeled_cases().map(|c| c.case_id.as_str()).collect();
        for id in &labeled {
            if !self.folds.contains_key(*id) {
                return Err(Error::Validation(format!(
                    "labeled case \"{id}\" has no fold assignment"
                )));
            }
        }
        let sizes = self.fold_sizes();
        if let Some((idx, _)) = sizes.iter().enumerate().find(|(_, &s)| s == 0) {
            return Err(Error::Validation(format!(
                "fold index {idx} out of range: fold {idx} is empty while higher indices are used"
            )));
        }
        let (min, max) = (
            *sizes.iter().min().unwrap_or(&0),
            *sizes.iter().max().unwrap_or(&0),
        );
        if max - min > 1 {
            return Err(Error::Validation(format!(
                "fold sizes unbalanced: {sizes:?} (must differ by at most 1)"
            )));
        }
        Ok(())
    }

    /// All case files present on disk; paths are expected to be resolved.
    pub fn check_paths(&self) -> Result<()> {
        for case in &self.cases {
            for (name, path) in [("dwi", Some(&case.dwi)), ("adc", Some(&case.adc))]
                .into_iter()
                .chain([("label", case.label.as_ref())])
            {
                if let Some(p) = path {
                    if !p.exists() {
                        return Err(Error::Validation(format!(
                            "case \"{}\": {name} path {} does not exist",
                            case.case_id,
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&p);
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let base = std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
    for case in &mut manifest.cases {
        resolve(&base, &mut case.dwi);
        resolve(&base, &mut case.adc);
        if let Some(f) = case.flair.as_mut() {
            resolve(&base, f);
        }
        if let Some(l) = case.label.as_mut() {
            resolve(&base, l);
        }
    }
    manifest.validate()?;
    manifest.check_paths()?;
    Ok(manifest)
}

/// Paths under the manifest's own directory are written relative to it, so
/// the document stays portable alongside its data.
pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate()?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let base = std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
    let relativize = |p: &PathBuf| -> PathBuf {
        std::fs::canonicalize(p)
            .ok()
            .and_then(|abs| abs.strip_prefix(&base).map(|r| r.to_path_buf()).ok())
            .unwrap_or_else(|| p.clone())
    };
    let mut portable = manifest.clone();
    for case in &mut portable.cases {
        case.dwi = relativize(&case.dwi);
        case.adc = relativize(&case.adc);
        if let Some(f) = case.flair.as_mut() {
            *f = relativize(f);
        }
        if let Some(l) = case.label.as_mut() {
            *l = relativize(l);
        }
    }
    let text = serde_json::to_string_pretty(&portable)
        .map_err(|e| Error::Validation(format!("manifest serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
