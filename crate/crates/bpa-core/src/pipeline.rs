//! Run-directory orchestration. Each stage function reads its inputs from a
//! run directory, writes its artifacts back alongside a config-hash stamp,
//! and refuses both to clobber a completed stage and to mix artifacts that
//! were produced by different configs.
//!
//! Layout under `<output_root>/run-<hash8>-s<seed>/`:
//! pools/<name>/{manifest.jsonl, images/, meta.json} for every image pool
//! (ingested and generated), then one directory per training or evaluation
//! stage (bulk/, transfer/, datasets/, detectors/, grader/, eval/, report/).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bulk::{generate_images, load_bulk, save_bulk, train_progressive};
use crate::classifier::{
    load_classifier, predict, save_classifier, split_indices, train_classifier,
};
use crate::config::{config_hash, PoolSource, RunConfig};
use crate::dataset::{
    build_condition, filter_artifacts, ingest, sample_without_replacement, scaled_count,
    ConditionId, IngestLabels, ADDED_TRANSFER, D_TRANSFER,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::manifest::{read_manifest, write_manifest, Diagnosis, ManifestRecord, Provenance};
use crate::metrics::{
    auc, confusion_counts, confusion_metrics, mean, roc_curve, sensitivity_specificity,
    ScoreHistogram,
};
use crate::report::{
    assemble_report, DetectorEval, GradingEval, MetricRow, NamedCurve, ScoreDistribution,
    HISTOGRAM_BINS,
};
use crate::rng::seeded;
use crate::toy::make_toy_pool;
use crate::transfer::{cycle_train, load_transfer, save_transfer, translate_images, Direction};

/// Full-size grader training draw: 8,000 nevi against 4,000 melanomas,
/// scaled by `condition_scale` like every other pool count.
pub const GRADER_NEVI: usize = 8_000;
pub const GRADER_MELANOMAS: usize = 4_000;

const DECISION_THRESHOLD: f64 = 0.5;

/// A validated config bound to its run directory.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub cfg: RunConfig,
    /// Full config hash; artifacts carry this and stages refuse to mix it.
    pub hash: String,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunMarker {
    config_hash: String,
    config: RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageMeta {
    config_hash: String,
    seed: u64,
    stage: String,
}

/// Held-out operating metrics of the malignancy grader.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraderHeldout {
    pub config_hash: String,
    pub seed: u64,
    pub n_heldout: usize,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub auc: f64,
}

impl RunContext {
    /// Validate the config, resolve its run directory, and bind to it.
    /// An existing directory is accepted only if its marker carries the
    /// same config hash.
    pub fn create(cfg: RunConfig) -> Result<RunContext> {
        cfg.validate()?;
        let hash = config_hash(&cfg)?;
        let dir = cfg.output_root.join(cfg.run_dir_name()?);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let marker_path = dir.join("config.json");
        if marker_path.exists() {
            let marker: RunMarker = read_json(&marker_path)?;
            if marker.config_hash != hash {
                return Err(Error::Config(format!(
                    "run directory {} was created with config {}, current config is {}",
                    dir.display(),
                    marker.config_hash,
                    hash
                )));
            }
        } else {
            write_json(
                &marker_path,
                &RunMarker {
                    config_hash: hash.clone(),
                    config: cfg.clone(),
                },
            )?;
        }
        Ok(RunContext { cfg, hash, dir })
    }

    pub fn pool_dir(&self, name: &str) -> PathBuf {
        self.dir.join("pools").join(name)
    }

    fn require_pool(&self, name: &str) -> Result<PathBuf> {
        let manifest = self.pool_dir(name).join("manifest.jsonl");
        if !manifest.exists() {
            return Err(Error::MissingInput(format!("missing: {}", pool_stage(name))));
        }
        Ok(manifest)
    }

    fn load_pool(&self, name: &str) -> Result<(Vec<ManifestRecord>, Vec<ImageTensor>)> {
        let manifest = self.require_pool(name)?;
        let records = read_manifest(&manifest)?;
        let dir = self.pool_dir(name);
        let mut images = Vec::with_capacity(records.len());
        for rec in &records {
            images.push(ImageTensor::load(&rec.resolve_path(&dir))?);
        }
        Ok((records, images))
    }

    /// Evaluation set for the structure detector: held-out real images,
    /// labeled by pool membership.
    fn test_set(&self) -> Result<(Vec<ImageTensor>, Vec<bool>)> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (pool, label) in [("test_nevus", false), ("test_apn", true)] {
            let (_, imgs) = self.load_pool(pool)?;
            labels.resize(labels.len() + imgs.len(), label);
            images.extend(imgs);
        }
        Ok((images, labels))
    }
}

/// The stage whose artifacts a pool of this name belongs to.
fn pool_stage(pool: &str) -> &'static str {
    match pool {
        "nevusg" | "transfer_base" => "generate-nevus",
        "apn_nevus" | "apn_nevusg" => "apply-transfer",
        _ => "ingest",
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Refuse to reuse a populated stage directory; create it otherwise.
fn ensure_fresh_dir(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        let occupied = path
            .read_dir()
            .map_err(|e| Error::io(path, e))?
            .next()
            .is_some();
        if occupied {
            return Err(Error::Runtime(format!(
                "{what} output already exists at {}; remove it to rerun the stage",
                path.display()
            )));
        }
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn ensure_fresh_file(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        return Err(Error::Runtime(format!(
            "{what} output already exists at {}; remove it to rerun the stage",
            path.display()
        )));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// Stamp a stage directory with the producing config hash, or verify an
/// existing stamp matches.
fn stamp(ctx: &RunContext, dir: &Path, stage: &str) -> Result<()> {
    let path = dir.join("meta.json");
    if path.exists() {
        let meta: StageMeta = read_json(&path)?;
        if meta.config_hash != ctx.hash {
            return Err(Error::Config(format!(
                "config hash mismatch in {}: artifact carries {}, current config is {}",
                dir.display(),
                meta.config_hash,
                ctx.hash
            )));
        }
        return Ok(());
    }
    write_json(
        &path,
        &StageMeta {
            config_hash: ctx.hash.clone(),
            seed: ctx.cfg.seed,
            stage: stage.to_string(),
        },
    )
}

/// Content-derived id for a generated image. The pool name and position are
/// mixed in so mode-collapsed generators cannot produce colliding ids.
fn generated_id(png_bytes: &[u8], pool: &str, index: usize) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(png_bytes);
    h.update(pool.as_bytes());
    h.update((index as u64).to_be_bytes());
    hex::encode(h.finalize())
}

fn write_generated_pool(
    ctx: &RunContext,
    name: &str,
    images: &[ImageTensor],
    provenance: Provenance,
    source_ids: Option<&[String]>,
    stage: &str,
) -> Result<()> {
    let pool_dir = ctx.pool_dir(name);
    ensure_fresh_dir(&pool_dir, &format!("pool {name}"))?;
    let images_dir = pool_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let tmp = images_dir.join("tmp.png");
    let mut records = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        img.save_png(&tmp)?;
        let bytes = fs::read(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let id = generated_id(&bytes, name, i);
        let file = images_dir.join(format!("{id}.png"));
        fs::rename(&tmp, &file).map_err(|e| Error::io(&file, e))?;
        records.push(ManifestRecord {
            id: id.clone(),
            path: format!("images/{id}.png"),
            label_structure: None,
            label_diagnosis: None,
            provenance,
            source_id: source_ids.map(|s| s[i].clone()),
            artifact_flags: Default::default(),
            checklist: None,
        });
    }
    write_manifest(&pool_dir.join("manifest.jsonl"), &records)?;
    stamp(ctx, &pool_dir, stage)
}

/// Materialize every configured pool: synthesize or read source images,
/// resize, dedup, label, drop excluded artifacts, and write the manifest.
pub fn stage_ingest(ctx: &RunContext) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for (name, spec) in &ctx.cfg.pools {
        let pool_dir = ctx.pool_dir(name);
        ensure_fresh_dir(&pool_dir, &format!("pool {name}"))?;
        let src = match &spec.source {
            PoolSource::Toy { style, count } => {
                let src = pool_dir.join("source");
                let mut r = seeded(ctx.cfg.seed, &format!("ingest/toy/{name}"));
                make_toy_pool(&src, *style, *count, ctx.cfg.resolution, r.random())?;
                src
            }
            PoolSource::Dir { path } => path.clone(),
        };
        let labels = IngestLabels {
            structure: spec.structure,
            diagnosis: spec.diagnosis,
        };
        let outcome = ingest(
            &src,
            &pool_dir.join("images"),
            "images",
            ctx.cfg.resolution,
            &labels,
        )?;
        let kept = filter_artifacts(&outcome.records, &ctx.cfg.excluded_artifacts);
        let excluded = outcome.records.len() - kept.len();
        write_manifest(&pool_dir.join("manifest.jsonl"), &kept)?;
        stamp(ctx, &pool_dir, "ingest")?;
        lines.push(format!(
            "pool {name}: {} records ({} undecodable, {} duplicates, {excluded} excluded by artifact flags)",
            kept.len(),
            outcome.skipped.len(),
            outcome.duplicates,
        ));
        for (path, why) in &outcome.skipped {
            lines.push(format!("  skipped {}: {why}", path.display()));
        }
    }
    Ok(lines)
}

/// Train the progressive generator on the real nevus pool.
pub fn stage_train_bulk(ctx: &RunContext) -> Result<Vec<String>> {
    let (_, images) = ctx.load_pool("nevus")?;
    let out = ctx.dir.join("bulk");
    ensure_fresh_dir(&out, "train-bulk")?;
    let mut log = String::from("step,stage,alpha,loss_g,loss_d,grad_penalty\n");
    let mut steps = 0u64;
    let mut model = train_progressive(&images, &ctx.cfg.bulk, ctx.cfg.seed, |row| {
        steps = row.step;
        log.push_str(&format!(
            "{},{},{:.4},{:.6},{:.6},{:.6}\n",
            row.step, row.stage, row.alpha, row.loss_g, row.loss_d, row.grad_penalty
        ));
    })?;
    write_text(&out.join("train_log.csv"), &log)?;
    let rng = seeded(ctx.cfg.seed, "bulk/post");
    save_bulk(&out.join("checkpoint.ckpt"), &mut model, &ctx.hash, &rng)?;
    stamp(ctx, &out, "train-bulk")?;
    Ok(vec![format!(
        "bulk generator trained for {steps} steps on {} images at {res}x{res} px",
        images.len(),
        res = ctx.cfg.resolution
    )])
}

/// Sample the trained generator into the plain generated pool plus the base
/// pool that feeds the structure transfer.
pub fn stage_generate_nevus(ctx: &RunContext) -> Result<Vec<String>> {
    let ckpt = ctx.dir.join("bulk").join("checkpoint.ckpt");
    if !ckpt.exists() {
        return Err(Error::MissingInput("missing: train-bulk".into()));
    }
    let (mut model, _) = load_bulk(&ckpt)?;
    let scale = ctx.cfg.condition_scale;
    let n_plain = scaled_count(ADDED_TRANSFER, scale);
    let n_base = scaled_count(D_TRANSFER, scale);
    let images = generate_images(&mut model, n_plain + n_base, ctx.cfg.seed)?;
    write_generated_pool(
        ctx,
        "nevusg",
        &images[..n_plain],
        Provenance::GeneratedPhase1,
        None,
        "generate-nevus",
    )?;
    write_generated_pool(
        ctx,
        "transfer_base",
        &images[n_plain..],
        Provenance::GeneratedPhase1,
        None,
        "generate-nevus",
    )?;
    Ok(vec![format!(
        "generated {n_plain} images into pool nevusg and {n_base} into pool transfer_base"
    )])
}

/// Train the cycle-consistent translator between the real nevus pool
/// (domain a) and the real structure pool (domain b).
pub fn stage_train_transfer(ctx: &RunContext) -> Result<Vec<String>> {
    let (_, pool_a) = ctx.load_pool("nevus")?;
    let (_, pool_b) = ctx.load_pool("apn")?;
    let out = ctx.dir.join("transfer");
    ensure_fresh_dir(&out, "train-transfer")?;
    let mut log = String::from("step,loss_g_ab,loss_g_ba,loss_d_a,loss_d_b,loss_cyc,loss_id\n");
    let mut last_cyc = f64::NAN;
    let mut model = cycle_train(&pool_a, &pool_b, &ctx.cfg.transfer, ctx.cfg.seed, |row| {
        last_cyc = row.loss_cyc;
        log.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            row.step, row.loss_g_ab, row.loss_g_ba, row.loss_d_a, row.loss_d_b, row.loss_cyc,
            row.loss_id
        ));
    })?;
    write_text(&out.join("train_log.csv"), &log)?;
    let rng = seeded(ctx.cfg.seed, "transfer/post");
    save_transfer(&out.join("checkpoint.ckpt"), &mut model, &ctx.hash, &rng)?;
    stamp(ctx, &out, "train-transfer")?;
    Ok(vec![format!(
        "translator trained for {} steps (final cycle loss {last_cyc:.4})",
        ctx.cfg.transfer.steps
    )])
}

/// Translate real nevi and generated bases into the structure domain.
pub fn stage_apply_transfer(ctx: &RunContext) -> Result<Vec<String>> {
    let ckpt = ctx.dir.join("transfer").join("checkpoint.ckpt");
    if !ckpt.exists() {
        return Err(Error::MissingInput("missing: train-transfer".into()));
    }
    let (mut model, _) = load_transfer(&ckpt)?;
    let scale = ctx.cfg.condition_scale;

    let (nevus_records, nevus_images) = ctx.load_pool("nevus")?;
    let need = scaled_count(ADDED_TRANSFER, scale);
    if nevus_images.len() < need {
        return Err(Error::MissingInput(format!(
            "insufficient pool: nevus (need {need}, have {})",
            nevus_images.len()
        )));
    }
    let translated = translate_images(&mut model, Direction::AToB, &nevus_images[..need])?;
    let sources: Vec<String> = nevus_records[..need].iter().map(|r| r.id.clone()).collect();
    write_generated_pool(
        ctx,
        "apn_nevus",
        &translated,
        Provenance::GeneratedPhase2,
        Some(&sources),
        "apply-transfer",
    )?;

    let (base_records, base_images) = ctx.load_pool("transfer_base")?;
    let translated_g = translate_images(&mut model, Direction::AToB, &base_images)?;
    let sources_g: Vec<String> = base_records.iter().map(|r| r.id.clone()).collect();
    write_generated_pool(
        ctx,
        "apn_nevusg",
        &translated_g,
        Provenance::GeneratedPhase2,
        Some(&sources_g),
        "apply-transfer",
    )?;

    Ok(vec![format!(
        "translated {need} real nevi into pool apn_nevus and {} generated bases into pool apn_nevusg",
        base_images.len()
    )])
}

fn selected_conditions(ctx: &RunContext, only: Option<ConditionId>) -> Vec<ConditionId> {
    match only {
        Some(c) => vec![c],
        None => ctx.cfg.conditions.clone(),
    }
}

/// Assemble per-condition training manifests by sampling from the pools.
pub fn stage_build_dataset(ctx: &RunContext, only: Option<ConditionId>) -> Result<Vec<String>> {
    let out = ctx.dir.join("datasets");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut lines = Vec::new();
    for cond in selected_conditions(ctx, only) {
        let path = out.join(format!("{cond}.jsonl"));
        ensure_fresh_file(&path, &format!("dataset {cond}"))?;
        let mut pools = BTreeMap::new();
        for (pool_name, _) in cond.counts(ctx.cfg.condition_scale) {
            let manifest = ctx.require_pool(pool_name)?;
            let mut records = read_manifest(&manifest)?;
            // Dataset manifests live one level away from the pools; keep
            // image paths resolvable relative to the manifest.
            for rec in &mut records {
                rec.path = format!("../pools/{pool_name}/{}", rec.path);
            }
            pools.insert(pool_name.to_string(), records);
        }
        let records = build_condition(cond, &pools, ctx.cfg.condition_scale, ctx.cfg.seed)?;
        let positive = records
            .iter()
            .filter(|r| r.label_structure == Some(true))
            .count();
        write_manifest(&path, &records)?;
        lines.push(format!(
            "condition {cond}: {} records ({positive} with the target structure)",
            records.len()
        ));
    }
    stamp(ctx, &out, "build-dataset")?;
    Ok(lines)
}

/// Train one structure detector per condition on its assembled dataset.
pub fn stage_train_apn(ctx: &RunContext, only: Option<ConditionId>) -> Result<Vec<String>> {
    let datasets_dir = ctx.dir.join("datasets");
    let out = ctx.dir.join("detectors");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut lines = Vec::new();
    for cond in selected_conditions(ctx, only) {
        let manifest_path = datasets_dir.join(format!("{cond}.jsonl"));
        if !manifest_path.exists() {
            return Err(Error::MissingInput("missing: build-dataset".into()));
        }
        let ckpt = out.join(format!("{cond}.ckpt"));
        ensure_fresh_file(&ckpt, &format!("detector {cond}"))?;
        let records = read_manifest(&manifest_path)?;
        let mut images = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for rec in &records {
            images.push(ImageTensor::load(&rec.resolve_path(&datasets_dir))?);
            labels.push(rec.label_structure.ok_or_else(|| {
                Error::Config(format!("record {} lacks a structure label", rec.id))
            })?);
        }
        let mut log = String::from("epoch,train_loss,val_auc\n");
        let mut final_auc = f64::NAN;
        let mut model = train_classifier(&images, &labels, &ctx.cfg.detector, ctx.cfg.seed, |row| {
            final_auc = row.val_auc;
            log.push_str(&format!(
                "{},{:.6},{:.6}\n",
                row.epoch, row.train_loss, row.val_auc
            ));
        })?;
        write_text(&out.join(format!("{cond}_log.csv")), &log)?;
        save_classifier(&ckpt, &mut model, &ctx.hash)?;
        lines.push(format!(
            "detector {cond}: {} epochs on {} images (final validation AUC {final_auc:.3})",
            ctx.cfg.detector.epochs,
            records.len()
        ));
    }
    stamp(ctx, &out, "train-apn")?;
    Ok(lines)
}

/// Train the malignancy grader on diagnosis-labeled pools and report its
/// operating metrics on a held-out split.
pub fn stage_train_grader(ctx: &RunContext) -> Result<Vec<String>> {
    let out = ctx.dir.join("grader");
    ensure_fresh_dir(&out, "train-grader")?;
    let scale = ctx.cfg.condition_scale;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (pool, full) in [("nevus", GRADER_NEVI), ("melanoma", GRADER_MELANOMAS)] {
        let (records, pool_images) = ctx.load_pool(pool)?;
        let need = scaled_count(full, scale);
        if records.len() < need {
            return Err(Error::MissingInput(format!(
                "insufficient pool: {pool} (need {need}, have {})",
                records.len()
            )));
        }
        let mut rng = seeded(ctx.cfg.seed, &format!("grader/{pool}"));
        for i in sample_without_replacement(records.len(), need, &mut rng) {
            let diagnosis = records[i].label_diagnosis.ok_or_else(|| {
                Error::Config(format!("record {} lacks a diagnosis label", records[i].id))
            })?;
            images.push(pool_images[i].clone());
            labels.push(diagnosis == Diagnosis::Melanoma);
        }
    }

    // Held-out split for the reported operating metrics; the trainer carves
    // its own validation split out of the remainder.
    let mut rng = seeded(ctx.cfg.seed, "grader/heldout");
    let (train_idx, held_idx) = split_indices(&labels, ctx.cfg.grader.val_fraction, &mut rng);
    let train_images: Vec<ImageTensor> = train_idx.iter().map(|&i| images[i].clone()).collect();
    let train_labels: Vec<bool> = train_idx.iter().map(|&i| labels[i]).collect();
    let mut log = String::from("epoch,train_loss,val_auc\n");
    let mut model = train_classifier(
        &train_images,
        &train_labels,
        &ctx.cfg.grader,
        ctx.cfg.seed,
        |row| {
            log.push_str(&format!(
                "{},{:.6},{:.6}\n",
                row.epoch, row.train_loss, row.val_auc
            ));
        },
    )?;
    write_text(&out.join("train_log.csv"), &log)?;

    let held_images: Vec<ImageTensor> = held_idx.iter().map(|&i| images[i].clone()).collect();
    let held_labels: Vec<bool> = held_idx.iter().map(|&i| labels[i]).collect();
    let scores = predict(&mut model, &held_images)?;
    let (sensitivity, specificity) =
        sensitivity_specificity(&scores, &held_labels, DECISION_THRESHOLD)?;
    let m = confusion_metrics(&scores, &held_labels, DECISION_THRESHOLD)?;
    let heldout = GraderHeldout {
        config_hash: ctx.hash.clone(),
        seed: ctx.cfg.seed,
        n_heldout: held_labels.len(),
        sensitivity,
        specificity,
        f1: m.f1,
        auc: auc(&scores, &held_labels)?,
    };
    write_json(&out.join("heldout.json"), &heldout)?;
    save_classifier(&out.join("checkpoint.ckpt"), &mut model, &ctx.hash)?;
    stamp(ctx, &out, "train-grader")?;
    Ok(vec![format!(
        "grader: sensitivity {sensitivity:.1}%, specificity {specificity:.1}%, F1 {:.1}% on {} held-out images",
        m.f1,
        held_labels.len()
    )])
}

/// Score every condition's detector on the held-out test pools.
pub fn stage_eval_apn(ctx: &RunContext) -> Result<Vec<String>> {
    let eval_dir = ctx.dir.join("eval");
    fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    let out_path = eval_dir.join("apn.json");
    ensure_fresh_file(&out_path, "eval-apn")?;
    let (test_images, test_labels) = ctx.test_set()?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut lines = Vec::new();
    for &cond in &ctx.cfg.conditions {
        let ckpt = ctx.dir.join("detectors").join(format!("{cond}.ckpt"));
        if !ckpt.exists() {
            return Err(Error::MissingInput("missing: train-apn".into()));
        }
        let mut model = load_classifier(&ckpt)?;
        let scores = predict(&mut model, &test_images)?;
        let counts = confusion_counts(&scores, &test_labels, DECISION_THRESHOLD);
        let curve = roc_curve(&scores, &test_labels)?;
        lines.push(format!(
            "condition {cond}: AUC {:.3} on {} test images",
            curve.auc,
            test_labels.len()
        ));
        rows.push(MetricRow {
            dataset: cond.to_string(),
            metrics: counts.metrics(),
            auc: curve.auc,
        });
        curves.push(NamedCurve {
            dataset: cond.to_string(),
            curve,
        });
    }
    write_json(
        &out_path,
        &DetectorEval {
            config_hash: ctx.hash.clone(),
            seed: ctx.cfg.seed,
            rows,
            curves,
        },
    )?;
    stamp(ctx, &eval_dir, "eval")?;
    Ok(lines)
}

/// Score-distribution comparison under the grader: real test pools against
/// plain generated bases and structure-assigned bases.
pub fn stage_eval_grading(ctx: &RunContext) -> Result<Vec<String>> {
    let eval_dir = ctx.dir.join("eval");
    fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    let out_path = eval_dir.join("grading.json");
    ensure_fresh_file(&out_path, "eval-grading")?;
    let ckpt = ctx.dir.join("grader").join("checkpoint.ckpt");
    if !ckpt.exists() {
        return Err(Error::MissingInput("missing: train-grader".into()));
    }
    let mut model = load_classifier(&ckpt)?;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for pool in ["test_nevus", "test_apn", "nevusg", "apn_nevusg"] {
        let (_, images) = ctx.load_pool(pool)?;
        if images.is_empty() {
            lines.push(format!("warning: dataset {pool} is empty, omitted"));
            continue;
        }
        let scores = predict(&mut model, &images)?;
        let mean_score = mean(&scores);
        lines.push(format!(
            "dataset {pool}: mean malignancy score {mean_score:.3} over {} images",
            images.len()
        ));
        rows.push(ScoreDistribution {
            dataset: pool.to_string(),
            mean_score,
            histogram: ScoreHistogram::new(&scores, HISTOGRAM_BINS),
        });
    }
    write_json(
        &out_path,
        &GradingEval {
            config_hash: ctx.hash.clone(),
            seed: ctx.cfg.seed,
            rows,
        },
    )?;
    stamp(ctx, &eval_dir, "eval")?;
    Ok(lines)
}

/// Render the metric table, ROC points, histograms, and run summary from
/// the evaluation artifacts.
pub fn stage_report(ctx: &RunContext) -> Result<Vec<String>> {
    let eval_dir = ctx.dir.join("eval");
    let apn_path = eval_dir.join("apn.json");
    if !apn_path.exists() {
        return Err(Error::MissingInput("missing: eval-apn".into()));
    }
    let grading_path = eval_dir.join("grading.json");
    if !grading_path.exists() {
        return Err(Error::MissingInput("missing: eval-grading".into()));
    }
    let detector: DetectorEval = read_json(&apn_path)?;
    let grading: GradingEval = read_json(&grading_path)?;
    let files = assemble_report(&ctx.hash, &detector, &grading)?;
    let out = ctx.dir.join("report");
    ensure_fresh_dir(&out, "report")?;
    write_text(&out.join("metrics.csv"), &files.metrics_csv)?;
    write_text(&out.join("roc.csv"), &files.roc_csv)?;
    write_text(&out.join("histograms.csv"), &files.histogram_csv)?;
    write_text(&out.join("summary.json"), &files.summary_json)?;
    stamp(ctx, &out, "report")?;
    Ok(vec![format!("report written to {}", out.display())])
}

/// Run every stage in dependency order.
pub fn run_all(ctx: &RunContext) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    let stages: [(&str, fn(&RunContext) -> Result<Vec<String>>); 11] = [
        ("ingest", stage_ingest),
        ("train-bulk", stage_train_bulk),
        ("generate-nevus", stage_generate_nevus),
        ("train-transfer", stage_train_transfer),
        ("apply-transfer", stage_apply_transfer),
        ("build-dataset", |ctx| stage_build_dataset(ctx, None)),
        ("train-apn", |ctx| stage_train_apn(ctx, None)),
        ("train-grader", stage_train_grader),
        ("eval-apn", stage_eval_apn),
        ("eval-grading", stage_eval_grading),
        ("report", stage_report),
    ];
    for (name, run) in stages {
        lines.push(format!("[{name}]"));
        lines.extend(run(ctx)?);
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{PoolSpec, Profile};
    use crate::toy::ToyStyle;

    fn toy_pool(style: ToyStyle, count: usize) -> PoolSpec {
        PoolSpec {
            source: PoolSource::Toy { style, count },
            structure: None,
            diagnosis: None,
        }
    }

    /// A heavily shrunk desk config that still exercises every stage.
    fn mini_cfg(root: &Path, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::profile_defaults(Profile::Desk, seed);
        cfg.output_root = root.to_path_buf();
        cfg.resolution = 16;
        cfg.condition_scale = 0.0004;
        cfg.bulk.target_resolution = 16;
        cfg.bulk.latent_dim = 8;
        cfg.bulk.fmap_base = 4;
        cfg.bulk.fmap_max = 8;
        cfg.bulk.batch_size = 4;
        cfg.bulk.images_per_stage = 16;
        cfg.transfer.resolution = 16;
        cfg.transfer.base_channels = 4;
        cfg.transfer.res_blocks = 1;
        cfg.transfer.steps = 4;
        for c in [&mut cfg.detector, &mut cfg.grader] {
            c.input_size = 16;
            c.epochs = 1;
            c.batch_size = 4;
        }
        cfg.pools = BTreeMap::from([
            (
                "nevus".to_string(),
                PoolSpec {
                    structure: Some(false),
                    diagnosis: Some(Diagnosis::Nevus),
                    ..toy_pool(ToyStyle::Plain, 8)
                },
            ),
            (
                "apn".to_string(),
                PoolSpec {
                    structure: Some(true),
                    ..toy_pool(ToyStyle::Grid, 6)
                },
            ),
            (
                "test_nevus".to_string(),
                PoolSpec {
                    structure: Some(false),
                    ..toy_pool(ToyStyle::Plain, 4)
                },
            ),
            (
                "test_apn".to_string(),
                PoolSpec {
                    structure: Some(true),
                    ..toy_pool(ToyStyle::Grid, 4)
                },
            ),
            (
                "melanoma".to_string(),
                PoolSpec {
                    diagnosis: Some(Diagnosis::Melanoma),
                    ..toy_pool(ToyStyle::GridStrong, 6)
                },
            ),
        ]);
        cfg
    }

    #[test]
    fn full_mini_run_produces_all_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let ctx = RunContext::create(mini_cfg(tmp.path(), 11)).unwrap();
        run_all(&ctx).unwrap();

        for pool in [
            "nevus",
            "apn",
            "test_nevus",
            "test_apn",
            "melanoma",
            "nevusg",
            "transfer_base",
            "apn_nevus",
            "apn_nevusg",
        ] {
            assert!(
                ctx.pool_dir(pool).join("manifest.jsonl").exists(),
                "missing pool {pool}"
            );
        }
        // Condition sizes at scale 0.0004: 4 nevi + 1 structure image base,
        // plus 4 transferred (B, C) or 4 + 8 generated (D).
        for (cond, expect) in [("A", 5), ("B", 9), ("C", 9), ("D", 17)] {
            let records =
                read_manifest(&ctx.dir.join("datasets").join(format!("{cond}.jsonl"))).unwrap();
            assert_eq!(records.len(), expect, "condition {cond}");
        }
        let eval: DetectorEval = read_json(&ctx.dir.join("eval").join("apn.json")).unwrap();
        assert_eq!(eval.config_hash, ctx.hash);
        assert_eq!(eval.rows.len(), 4);
        let grading: GradingEval = read_json(&ctx.dir.join("eval").join("grading.json")).unwrap();
        assert_eq!(grading.rows.len(), 4);
        let heldout: GraderHeldout =
            read_json(&ctx.dir.join("grader").join("heldout.json")).unwrap();
        assert_eq!(heldout.config_hash, ctx.hash);
        for file in ["metrics.csv", "roc.csv", "histograms.csv", "summary.json"] {
            assert!(ctx.dir.join("report").join(file).exists(), "missing {file}");
        }
        let metrics = fs::read_to_string(ctx.dir.join("report").join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 5);
        assert!(metrics.starts_with("Dataset,Accuracy,Recall,Precision,F1,AUC\n"));

        // Completed stages refuse to run again.
        let err = stage_ingest(&ctx).unwrap_err();
        assert!(matches!(err, Error::Runtime(_)), "{err:?}");
        let err = stage_report(&ctx).unwrap_err();
        assert!(matches!(err, Error::Runtime(_)), "{err:?}");

        // Rebinding to the same run directory with the same config is fine.
        RunContext::create(mini_cfg(tmp.path(), 11)).unwrap();
    }

    #[test]
    fn missing_dependencies_name_the_producing_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let ctx = RunContext::create(mini_cfg(tmp.path(), 12)).unwrap();

        let cases: [(&str, Result<Vec<String>>); 6] = [
            ("ingest", stage_train_bulk(&ctx)),
            ("train-bulk", stage_generate_nevus(&ctx)),
            ("train-transfer", stage_apply_transfer(&ctx)),
            ("ingest", stage_build_dataset(&ctx, Some(ConditionId::A))),
            ("build-dataset", stage_train_apn(&ctx, Some(ConditionId::A))),
            ("eval-apn", stage_report(&ctx)),
        ];
        for (stage, result) in cases {
            match result.unwrap_err() {
                Error::MissingInput(msg) => {
                    assert_eq!(msg, format!("missing: {stage}"));
                }
                other => panic!("expected missing-input error, got {other:?}"),
            }
        }
    }

    #[test]
    fn run_directory_rejects_a_different_config() {
        let tmp = tempfile::tempdir().unwrap();
        let ctx = RunContext::create(mini_cfg(tmp.path(), 13)).unwrap();
        // Same directory, tampered marker: simulate an artifact produced by
        // another config.
        let marker_path = ctx.dir.join("config.json");
        let mut marker: RunMarker = read_json(&marker_path).unwrap();
        marker.config_hash = "0".repeat(64);
        write_json(&marker_path, &marker).unwrap();
        let err = RunContext::create(mini_cfg(tmp.path(), 13)).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("was created with config"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
