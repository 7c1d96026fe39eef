//! Declarative run configuration: a TOML file selects a scale profile and
//! overrides individual knobs; everything else comes from the profile
//! defaults. The resolved config hashes to a stable id that names the run
//! directory and tags every artifact.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::bulk::BulkConfig;
use crate::classifier::{ClassifierConfig, WdMode};
use crate::dataset::ConditionId;
use crate::error::{Error, Result};
use crate::manifest::{ArtifactFlag, Diagnosis};
use crate::toy::ToyStyle;
use crate::transfer::TransferConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Toy corpora and small models; the full pipeline runs in minutes.
    Desk,
    /// Full-size models and counts; needs real data and heavy compute.
    Paper,
}

/// Where a pool's images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolSource {
    /// Synthesized on ingest.
    Toy { style: ToyStyle, count: usize },
    /// Read from a directory of image files.
    Dir { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    #[serde(flatten)]
    pub source: PoolSource,
    /// Structure label stamped on every record of the pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<bool>,
    /// Diagnosis label stamped on every record of the pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<Diagnosis>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Parent directory for run outputs. Excluded from the config hash.
    pub output_root: PathBuf,
    /// Working image side length for ingest and both generators.
    pub resolution: usize,
    /// Factor applied to the full-size per-pool counts.
    pub condition_scale: f64,
    pub conditions: Vec<ConditionId>,
    pub excluded_artifacts: BTreeSet<ArtifactFlag>,
    pub pools: BTreeMap<String, PoolSpec>,
    pub bulk: BulkConfig,
    pub transfer: TransferConfig,
    pub detector: ClassifierConfig,
    pub grader: ClassifierConfig,
}

impl RunConfig {
    pub fn profile_defaults(profile: Profile, seed: u64) -> RunConfig {
        match profile {
            Profile::Desk => RunConfig {
                profile,
                seed,
                output_root: PathBuf::from("runs"),
                resolution: 32,
                condition_scale: 0.01,
                conditions: ConditionId::ALL.to_vec(),
                excluded_artifacts: all_artifacts(),
                pools: desk_pools(),
                bulk: BulkConfig {
                    images_per_stage: 800,
                    ..BulkConfig::default()
                },
                transfer: TransferConfig {
                    base_channels: 6,
                    res_blocks: 2,
                    ..TransferConfig::default()
                },
                detector: desk_classifier(),
                grader: desk_classifier(),
            },
            Profile::Paper => RunConfig {
                profile,
                seed,
                output_root: PathBuf::from("runs"),
                resolution: 256,
                condition_scale: 1.0,
                conditions: ConditionId::ALL.to_vec(),
                excluded_artifacts: all_artifacts(),
                // Real data directories must be supplied by the user.
                pools: BTreeMap::new(),
                bulk: BulkConfig {
                    latent_dim: 512,
                    target_resolution: 256,
                    fmap_base: 16,
                    fmap_max: 512,
                    batch_size: 16,
                    images_per_stage: 800_000,
                    ..BulkConfig::default()
                },
                transfer: TransferConfig {
                    resolution: 256,
                    base_channels: 64,
                    res_blocks: 9,
                    steps: 100_000,
                    ..TransferConfig::default()
                },
                detector: paper_classifier(),
                grader: paper_classifier(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bulk.target_resolution != self.resolution {
            return Err(Error::Config(format!(
                "resolution mismatch: top-level resolution is {} but bulk.target_resolution is {}",
                self.resolution, self.bulk.target_resolution
            )));
        }
        if self.transfer.resolution != self.resolution {
            return Err(Error::Config(format!(
                "resolution mismatch: top-level resolution is {} but transfer.resolution is {}",
                self.resolution, self.transfer.resolution
            )));
        }
        if !(self.condition_scale > 0.0 && self.condition_scale <= 1.0) {
            return Err(Error::Config(format!(
                "condition_scale must be in (0, 1], got {}",
                self.condition_scale
            )));
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("conditions must not be empty".into()));
        }
        let unique: BTreeSet<_> = self.conditions.iter().collect();
        if unique.len() != self.conditions.len() {
            return Err(Error::Config("conditions contains duplicates".into()));
        }
        for (name, spec) in &self.pools {
            if name.is_empty() {
                return Err(Error::Config("pool names must not be empty".into()));
            }
            match &spec.source {
                PoolSource::Toy { count, .. } => {
                    if *count == 0 {
                        return Err(Error::Config(format!(
                            "pool {name}: toy count must be positive"
                        )));
                    }
                }
                PoolSource::Dir { path } => {
                    if !path.is_dir() {
                        return Err(Error::Config(format!(
                            "pool {name}: directory not found: {}",
                            path.display()
                        )));
                    }
                }
            }
        }
        self.bulk.validate()?;
        self.transfer.validate()?;
        self.detector.validate()?;
        self.grader.validate()?;
        Ok(())
    }

    /// Directory name for this run under output_root.
    pub fn run_dir_name(&self) -> Result<String> {
        let hash = config_hash(self)?;
        Ok(format!("run-{}-s{}", &hash[..8], self.seed))
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.output_root.join(self.run_dir_name()?))
    }
}

fn all_artifacts() -> BTreeSet<ArtifactFlag> {
    BTreeSet::from([
        ArtifactFlag::Hair,
        ArtifactFlag::Measure,
        ArtifactFlag::Pen,
        ArtifactFlag::Acral,
    ])
}

fn paper_classifier() -> ClassifierConfig {
    ClassifierConfig {
        backbone: "efficientnet-b1".into(),
        input_size: 240,
        lr: 1e-5,
        momentum: 0.9,
        weight_decay: 1e-6,
        epochs: 30,
        batch_size: 32,
        ..ClassifierConfig::default()
    }
}

/// Desk-scale training setup. The full-strength RandAugment chain is
/// calibrated for 240 px inputs and wipes out fine texture at 32 px, so the
/// desk profile keeps crops and flips only. The per-epoch lr decay anneals
/// the short schedule to a stable endpoint.
fn desk_classifier() -> ClassifierConfig {
    ClassifierConfig {
        input_size: 32,
        lr: 0.1,
        momentum: 0.5,
        weight_decay: 0.1,
        wd_mode: WdMode::EpochLrDecay,
        epochs: 24,
        batch_size: 8,
        grad_clip: 1.0,
        augment: AugmentPolicy {
            crop_scale: (0.7, 1.0),
            rand_n: 0,
            ..AugmentPolicy::default()
        },
        ..ClassifierConfig::default()
    }
}

fn toy_pool(style: ToyStyle, count: usize) -> PoolSpec {
    PoolSpec {
        source: PoolSource::Toy { style, count },
        structure: None,
        diagnosis: None,
    }
}

/// Default toy corpus: plain blobs stand in for nevi, grid-marked blobs
/// for the structure class, strong grids for melanomas.
fn desk_pools() -> BTreeMap<String, PoolSpec> {
    let mut pools = BTreeMap::new();
    pools.insert(
        "nevus".to_string(),
        PoolSpec {
            structure: Some(false),
            diagnosis: Some(Diagnosis::Nevus),
            ..toy_pool(ToyStyle::Plain, 150)
        },
    );
    pools.insert(
        "apn".to_string(),
        PoolSpec {
            structure: Some(true),
            ..toy_pool(ToyStyle::Grid, 30)
        },
    );
    pools.insert(
        "test_nevus".to_string(),
        PoolSpec {
            structure: Some(false),
            ..toy_pool(ToyStyle::Plain, 60)
        },
    );
    pools.insert(
        "test_apn".to_string(),
        PoolSpec {
            structure: Some(true),
            ..toy_pool(ToyStyle::Grid, 30)
        },
    );
    pools.insert(
        "melanoma".to_string(),
        PoolSpec {
            diagnosis: Some(Diagnosis::Melanoma),
            ..toy_pool(ToyStyle::GridStrong, 60)
        },
    );
    pools
}

/// Sha256 over the canonical JSON form of the config with `output_root`
/// removed, so relocating outputs never changes the run identity.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let mut value = serde_json::to_value(cfg).map_err(|e| Error::Serde(e.to_string()))?;
    value
        .as_object_mut()
        .expect("config serializes to an object")
        .remove("output_root");
    let canonical = serde_json::to_string(&value).map_err(|e| Error::Serde(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

/// Pick the compute device. Only "cpu" exists; the variable is accepted so
/// configs stay portable to builds with accelerators.
pub fn resolve_device(requested: Option<&str>) -> Result<&'static str> {
    match requested {
        None | Some("cpu") => Ok("cpu"),
        Some(other) => Err(Error::Config(format!(
            "BPA_DEVICE={other} is not supported; only \"cpu\" is available"
        ))),
    }
}

pub fn device_from_env() -> Result<&'static str> {
    match std::env::var("BPA_DEVICE") {
        Ok(v) => resolve_device(Some(&v)),
        Err(_) => resolve_device(None),
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub output_root: Option<PathBuf>,
}

fn deep_merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Load, merge, and validate a run config.
///
/// The file selects a profile (default desk); profile defaults fill every
/// field the file does not set. `seed` has no default and must come from
/// the file or the override. A `pools` table in the file replaces the
/// default pools wholesale rather than merging into them.
pub fn load_config(path: &Path, overrides: &CliOverrides) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let user: toml::Value = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let user_table = user
        .as_table()
        .ok_or_else(|| Error::Config(format!("{}: top level must be a table", path.display())))?;

    let profile = match user_table.get("profile") {
        None => Profile::Desk,
        Some(toml::Value::String(s)) => match s.as_str() {
            "desk" => Profile::Desk,
            "paper" => Profile::Paper,
            other => {
                return Err(Error::Config(format!(
                    "profile must be \"desk\" or \"paper\", got {other:?}"
                )))
            }
        },
        Some(_) => return Err(Error::Config("profile must be a string".into())),
    };

    let defaults = RunConfig::profile_defaults(profile, 0);
    let mut merged =
        toml::Value::try_from(&defaults).map_err(|e| Error::Serde(e.to_string()))?;
    {
        let table = merged.as_table_mut().expect("defaults serialize to a table");
        // Seeds are always explicit; pools replace rather than merge.
        table.remove("seed");
        if user_table.contains_key("pools") {
            table.remove("pools");
        }
    }
    deep_merge(&mut merged, user);

    let table = merged.as_table_mut().expect("merged config is a table");
    if let Some(seed) = overrides.seed {
        let seed = i64::try_from(seed)
            .map_err(|_| Error::Config(format!("seed {seed} exceeds the config format range")))?;
        table.insert("seed".to_string(), toml::Value::Integer(seed));
    }
    if let Some(root) = &overrides.output_root {
        table.insert(
            "output_root".to_string(),
            toml::Value::String(root.to_string_lossy().into_owned()),
        );
    }

    let cfg: RunConfig = merged
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
