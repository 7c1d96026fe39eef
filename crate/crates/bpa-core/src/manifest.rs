//! Provenance-tagged image manifests, stored as JSON lines.
//!
//! A manifest is the unit of exchange between pipeline stages: every image
//! pool, generated batch, and assembled training dataset is a list of
//! [`ManifestRecord`]s. Paths are stored relative to the manifest file's
//! directory so run directories stay relocatable.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checklist::ChecklistAssessment;
use crate::error::{Error, Result};

/// Where an image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Ingested from user-supplied files.
    Real,
    /// Synthesized by the bulk-production generator.
    GeneratedPhase1,
    /// Produced by the structure-transfer translator.
    GeneratedPhase2,
}

/// Diagnosis label, when known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    Nevus,
    Melanoma,
}

/// Acquisition artifacts that disqualify an image from generator training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactFlag {
    Hair,
    Measure,
    Pen,
    Acral,
}

impl ArtifactFlag {
    pub const ALL: [ArtifactFlag; 4] = [
        ArtifactFlag::Hair,
        ArtifactFlag::Measure,
        ArtifactFlag::Pen,
        ArtifactFlag::Acral,
    ];
}

/// One image's identity, labels, and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Lowercase-hex content hash of the image file.
    pub id: String,
    /// Path relative to the manifest's directory.
    pub path: String,
    /// Whether the target dermoscopic structure is present, if labeled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_structure: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_diagnosis: Option<Diagnosis>,
    pub provenance: Provenance,
    /// For phase-2 images: the id of the image that was translated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub artifact_flags: BTreeSet<ArtifactFlag>,
    /// Full seven-structure assessment, when one has been recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checklist: Option<ChecklistAssessment>,
}

impl ManifestRecord {
    /// Structural invariants every stored record must satisfy.
    pub fn validate(&self) -> Result<()> {
        match self.provenance {
            Provenance::Real if self.source_id.is_some() => Err(Error::Serde(format!(
                "record {}: real images cannot carry a source_id",
                self.id
            ))),
            Provenance::GeneratedPhase2 if self.source_id.is_none() => Err(Error::Serde(format!(
                "record {}: phase-2 images must carry a source_id",
                self.id
            ))),
            _ => Ok(()),
        }
    }

    /// Resolve `path` against the directory the manifest lives in.
    pub fn resolve_path(&self, manifest_dir: &Path) -> PathBuf {
        manifest_dir.join(&self.path)
    }
}

/// Write records as JSON lines (one record per line, UTF-8).
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        rec.validate()?;
        let line = serde_json::to_string(rec).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read and validate a JSON-lines manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(format!("manifest not found: {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Serde(format!(
                "{}:{}: bad manifest record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}
