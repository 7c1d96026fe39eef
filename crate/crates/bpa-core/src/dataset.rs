//! Pool ingestion, artifact filtering, and assembly of the four training
//! conditions that pair real nevi and structure-positive images with the
//! two generated pools.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{content_hash_file, ImageTensor};
use crate::manifest::{ArtifactFlag, Diagnosis, ManifestRecord, Provenance};
use crate::rng::seeded;
use crate::toy::detect_artifacts;

/// Pool-level labels stamped onto every record of one ingested directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestLabels {
    pub structure: Option<bool>,
    pub diagnosis: Option<Diagnosis>,
}

#[derive(Debug, Default)]
pub struct IngestOutcome {
    pub records: Vec<ManifestRecord>,
    /// Files that could not be decoded, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    /// Files whose content hash matched an earlier record.
    pub duplicates: usize,
}

fn walk_sorted(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            walk_sorted(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

type SidecarFlags = BTreeMap<String, BTreeSet<ArtifactFlag>>;

fn read_sidecar(src: &Path) -> Result<SidecarFlags> {
    let path = src.join("artifacts.json");
    if !path.exists() {
        return Ok(SidecarFlags::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Serde(format!("bad artifact sidecar {}: {e}", path.display())))
}

/// Ingest every decodable png/jpg/jpeg under `src` (recursively): resize
/// to the target square (center-crop then scale), store under
/// `dest_images/<content-hash>.png`, and return real-provenance records
/// whose paths are `<rel_prefix>/<id>.png`.
///
/// Ids hash the source bytes, so re-ingesting a directory reproduces the
/// same ids. Undecodable files are skipped and reported, not fatal.
/// Artifact flags merge the optional `artifacts.json` sidecar (keyed by
/// path relative to `src`) with the built-in streak heuristic.
pub fn ingest(
    src: &Path,
    dest_images: &Path,
    rel_prefix: &str,
    target_resolution: usize,
    labels: &IngestLabels,
) -> Result<IngestOutcome> {
    if target_resolution == 0 {
        return Err(Error::Config("target_resolution must be positive".into()));
    }
    if !src.is_dir() {
        return Err(Error::MissingInput(format!(
            "ingest source is not a directory: {}",
            src.display()
        )));
    }
    std::fs::create_dir_all(dest_images).map_err(|e| Error::io(dest_images, e))?;
    let sidecar = read_sidecar(src)?;

    let mut files = Vec::new();
    walk_sorted(src, &mut files)?;

    let mut outcome = IngestOutcome::default();
    let mut seen = BTreeSet::new();
    for path in files.into_iter().filter(|p| is_image_file(p)) {
        let img = match ImageTensor::load(&path) {
            Ok(img) => img,
            Err(e) => {
                outcome.skipped.push((path, e.to_string()));
                continue;
            }
        };
        let id = content_hash_file(&path)?;
        if !seen.insert(id.clone()) {
            outcome.duplicates += 1;
            continue;
        }
        let resized = img.ingest_resize(target_resolution);
        resized.save_png(&dest_images.join(format!("{id}.png")))?;

        let rel_key = path
            .strip_prefix(src)
            .unwrap_or(&path)
            .to_string_lossy()
            .replace('\\', "/");
        let mut flags = detect_artifacts(&resized);
        if let Some(extra) = sidecar.get(&rel_key) {
            flags.extend(extra.iter().copied());
        }

        outcome.records.push(ManifestRecord {
            id: id.clone(),
            path: format!("{rel_prefix}/{id}.png"),
            label_structure: labels.structure,
            label_diagnosis: labels.diagnosis,
            provenance: Provenance::Real,
            source_id: None,
            artifact_flags: flags,
            checklist: None,
        });
    }
    Ok(outcome)
}

/// Drop records whose artifact flags intersect the excluded set.
pub fn filter_artifacts(
    records: &[ManifestRecord],
    excluded: &BTreeSet<ArtifactFlag>,
) -> Vec<ManifestRecord> {
    records
        .iter()
        .filter(|r| r.artifact_flags.is_disjoint(excluded))
        .cloned()
        .collect()
}

/// The four detector training conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConditionId {
    A,
    B,
    C,
    D,
}

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditionId::A => "A",
            ConditionId::B => "B",
            ConditionId::C => "C",
            ConditionId::D => "D",
        })
    }
}

impl std::str::FromStr for ConditionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(ConditionId::A),
            "B" | "b" => Ok(ConditionId::B),
            "C" | "c" => Ok(ConditionId::C),
            "D" | "d" => Ok(ConditionId::D),
            other => Err(Error::Config(format!(
                "unknown condition {other:?}, expected A, B, C, or D"
            ))),
        }
    }
}

/// Full-scale per-pool counts: 10,000 real nevi and 230 structure
/// positives everywhere; B and C add 10,000 transferred images (from real
/// or generated bases); D adds 10,000 plain generated negatives and
/// 20,000 transferred positives.
pub const BASE_NEVUS: usize = 10_000;
pub const BASE_APN: usize = 230;
pub const ADDED_TRANSFER: usize = 10_000;
pub const D_TRANSFER: usize = 20_000;

/// Scale a full-size count down to a desk profile, never below one.
pub fn scaled_count(full: usize, scale: f64) -> usize {
    ((full as f64 * scale).round() as usize).max(1)
}

impl ConditionId {
    pub const ALL: [ConditionId; 4] = [
        ConditionId::A,
        ConditionId::B,
        ConditionId::C,
        ConditionId::D,
    ];

    /// Pool-name to sample-count map at the given scale (1.0 = full size).
    pub fn counts(&self, scale: f64) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        m.insert("nevus", scaled_count(BASE_NEVUS, scale));
        m.insert("apn", scaled_count(BASE_APN, scale));
        match self {
            ConditionId::A => {}
            ConditionId::B => {
                m.insert("apn_nevus", scaled_count(ADDED_TRANSFER, scale));
            }
            ConditionId::C => {
                m.insert("apn_nevusg", scaled_count(ADDED_TRANSFER, scale));
            }
            ConditionId::D => {
                m.insert("nevusg", scaled_count(ADDED_TRANSFER, scale));
                m.insert("apn_nevusg", scaled_count(D_TRANSFER, scale));
            }
        }
        m
    }
}

/// Structure label assigned to every record drawn from a pool.
pub fn structure_label_for_pool(pool: &str) -> Result<bool> {
    match pool {
        "apn" | "apn_nevus" | "apn_nevusg" => Ok(true),
        "nevus" | "nevusg" => Ok(false),
        other => Err(Error::Config(format!(
            "pool {other:?} has no structure-label mapping"
        ))),
    }
}

/// Sample `need` distinct indices from `0..n` (partial Fisher-Yates).
pub(crate) fn sample_without_replacement(
    n: usize,
    need: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..need {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(need);
    idx
}

/// Assemble one training condition by sampling each constituent pool
/// without replacement and stamping the pool's structure label onto the
/// drawn records. Deterministic in (condition, seed).
pub fn build_condition(
    cond: ConditionId,
    pools: &BTreeMap<String, Vec<ManifestRecord>>,
    scale: f64,
    seed: u64,
) -> Result<Vec<ManifestRecord>> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Config(format!(
            "condition scale must be in (0, 1], got {scale}"
        )));
    }
    let mut out = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (pool_name, need) in cond.counts(scale) {
        let have = pools.get(pool_name).map_or(0, Vec::len);
        if have < need {
            return Err(Error::MissingInput(format!(
                "insufficient pool: {pool_name} (need {need}, have {have})"
            )));
        }
        let pool = &pools[pool_name];
        let label = structure_label_for_pool(pool_name)?;
        let mut rng = seeded(seed, &format!("dataset/{cond}/{pool_name}"));
        for i in sample_without_replacement(have, need, &mut rng) {
            let mut rec = pool[i].clone();
            rec.label_structure = Some(label);
            if !seen_ids.insert(rec.id.clone()) {
                return Err(Error::Config(format!(
                    "duplicate id {} across pools of condition {cond}",
                    rec.id
                )));
            }
            out.push(rec);
        }
    }
    Ok(out)
}
