//! `path,label,domain` corpus manifests.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Class index used by the classifier head.
    pub fn class(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_class(class: usize) -> Self {
        if class == 0 {
            Label::Real
        } else {
            Label::Fake
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            _ => Err(Error::Data(format!("unknown label {s:?} (expected real or fake)"))),
        }
    }
}

/// One corpus entry. `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: Label,
    pub domain: String,
}

#[derive(Serialize, Deserialize)]
struct Row {
    path: String,
    label: String,
    domain: String,
}

const HEADER: [&str; 3] = ["path", "label", "domain"];

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(Row {
            path: r.path.to_string_lossy().replace('\\', "/"),
            label: r.label.as_str().into(),
            domain: r.domain.clone(),
        })
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses and validates a manifest: exact header, known labels, unique
/// paths, and every referenced image present on disk.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    if !path.is_file() {
        return Err(Error::Data(format!("manifest {} does not exist", path.display())));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = reader.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(Error::Data(format!(
            "manifest header must be path,label,domain, got {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("manifest row {}: {e}", line + 2)))?;
        let record = ManifestRecord {
            path: PathBuf::from(row.path.trim()),
            label: row.label.parse()?,
            domain: row.domain.trim().to_string(),
        };
        if record.domain.is_empty() {
            return Err(Error::Data(format!("manifest row {} has an empty domain", line + 2)));
        }
        if !seen.insert(record.path.clone()) {
            return Err(Error::Data(format!("duplicate path {} in manifest", record.path.display())));
        }
        if !root.join(&record.path).is_file() {
            return Err(Error::Data(format!("image {} listed in manifest is missing", record.path.display())));
        }
        records.push(record);
    }
    Ok(records)
}
