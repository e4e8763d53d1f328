//! Dataset manifests: one JSON object per line.
//!
//! Line 1 is a header `{"class_labels": [...], "created_with": "...",
//! "root_hint": "...", "complete": true}`; every following line is an
//! [`ImageRecord`]. Records are written sorted by
//! `(condition_label, relative_path)`. Relative paths resolve against the
//! directory holding the manifest file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::SkinTone;
use crate::seed::sha256_hex;

pub const TOOL_VERSION: &str = concat!("dermsynth ", env!("CARGO_PKG_VERSION"));

/// Default manifest filename inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub relative_path: String,
    pub condition_label: String,
    pub source: Source,
    #[serde(default)]
    pub prompt_rendered: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skin_tone: Option<SkinTone>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_id: Option<String>,
    pub checksum: String,
}

impl ImageRecord {
    /// File stem of the stored image, used to name derived artifacts.
    pub fn stem(&self) -> String {
        Path::new(&self.relative_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.relative_path.replace('/', "_"))
    }

    fn check(&self) -> Result<(), String> {
        match self.source {
            Source::Synthetic => {
                if self.prompt_rendered.is_empty() || self.seed.is_none() || self.backend_id.is_none() {
                    return Err(format!(
                        "synthetic record {} lacks prompt, seed or backend id",
                        self.relative_path
                    ));
                }
            }
            Source::Real => {
                if !self.prompt_rendered.is_empty() || self.seed.is_some() || self.backend_id.is_some() {
                    return Err(format!(
                        "real record {} carries generation provenance",
                        self.relative_path
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    class_labels: Vec<String>,
    created_with: String,
    root_hint: String,
    #[serde(default = "yes")]
    complete: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub class_labels: Vec<String>,
    pub created_with: String,
    /// Directory the relative paths resolve against.
    pub root_hint: String,
    /// False when a build stopped early and saved what it had.
    pub complete: bool,
}

impl DatasetManifest {
    pub fn new(class_labels: Vec<String>, root: &Path) -> Self {
        DatasetManifest {
            records: Vec::new(),
            class_labels,
            created_with: TOOL_VERSION.to_string(),
            root_hint: root.display().to_string(),
            complete: true,
        }
    }

    /// Copy with the same header and a different record set.
    pub fn with_records(&self, mut records: Vec<ImageRecord>) -> Self {
        sort_records(&mut records);
        DatasetManifest {
            records,
            class_labels: self.class_labels.clone(),
            created_with: self.created_with.clone(),
            root_hint: self.root_hint.clone(),
            complete: self.complete,
        }
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        Path::new(&self.root_hint).join(&record.relative_path)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sort(&mut self) {
        sort_records(&mut self.records);
    }

    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut out: BTreeMap<String, usize> =
            self.class_labels.iter().map(|l| (l.clone(), 0)).collect();
        for r in &self.records {
            *out.entry(r.condition_label.clone()).or_default() += 1;
        }
        out
    }

    /// Counts per `(label, Fitzpatrick grade name)`; unknown tones are keyed `"unknown"`.
    pub fn tone_counts(&self) -> BTreeMap<(String, String), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            let tone = r
                .skin_tone
                .as_ref()
                .map(|t| t.grade.name().to_string())
                .unwrap_or_else(|| "unknown".into());
            *out.entry((r.condition_label.clone(), tone)).or_default() += 1;
        }
        out
    }

    /// Records grouped per class in `class_labels` order.
    pub fn by_class(&self) -> Vec<(String, Vec<&ImageRecord>)> {
        self.class_labels
            .iter()
            .map(|l| {
                (
                    l.clone(),
                    self.records.iter().filter(|r| &r.condition_label == l).collect(),
                )
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !self.class_labels.contains(&r.condition_label) {
                return Err(ManifestError::Invalid(format!(
                    "record {} has label {} not in class_labels",
                    r.relative_path, r.condition_label
                )));
            }
            if !seen.insert(&r.relative_path) {
                return Err(ManifestError::Invalid(format!(
                    "duplicate relative_path {}",
                    r.relative_path
                )));
            }
            r.check().map_err(ManifestError::Invalid)?;
        }
        Ok(())
    }

    /// Serialized form (header line plus sorted records), without reordering `self`.
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            class_labels: self.class_labels.clone(),
            created_with: self.created_with.clone(),
            root_hint: self.root_hint.clone(),
            complete: self.complete,
        };
        let mut records = self.records.clone();
        sort_records(&mut records);
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Records-only serialization, independent of the root directory.
    pub fn records_digest(&self) -> String {
        let mut records = self.records.clone();
        sort_records(&mut records);
        let mut text = self.class_labels.join("\n");
        for r in &records {
            text.push('\n');
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
        }
        sha256_hex(text.as_bytes())
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        self.validate()?;
        let io = |source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(self.to_jsonl().as_bytes()).map_err(io)?;
        Ok(())
    }

    /// Reads a manifest. Paths resolve against the header's root when that
    /// directory exists (relative roots are taken from the manifest's
    /// directory), otherwise against the manifest's own directory.
    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let shown = path.display().to_string();
        let file = fs::File::open(path).map_err(|source| ManifestError::Io {
            path: shown.clone(),
            source,
        })?;
        let mut lines = BufReader::new(file).lines();
        let parse_err = |line: usize, message: String| ManifestError::Parse {
            path: shown.clone(),
            line,
            message,
        };
        let header_line = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty manifest".into()))?
            .map_err(|source| ManifestError::Io {
                path: shown.clone(),
                source,
            })?;
        let header: Header =
            serde_json::from_str(&header_line).map_err(|e| parse_err(1, e.to_string()))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|source| ManifestError::Io {
                path: shown.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?,
            );
        }
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let hinted = dir.join(&header.root_hint);
        let root = if !header.root_hint.is_empty() && hinted.is_dir() {
            hinted
        } else {
            dir.to_path_buf()
        };
        let manifest = DatasetManifest {
            records,
            class_labels: header.class_labels,
            created_with: header.created_with,
            root_hint: root.display().to_string(),
            complete: header.complete,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn sort_records(records: &mut [ImageRecord]) {
    records.sort_by(|a, b| {
        (a.condition_label.as_str(), a.relative_path.as_str())
            .cmp(&(b.condition_label.as_str(), b.relative_path.as_str()))
    });
}
