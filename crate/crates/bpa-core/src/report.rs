//! Report assembly: the metric table, ROC points, and score histograms as
//! CSV text, plus a per-run JSON summary. Rendering is pure string work so
//! byte-level determinism reduces to deterministic inputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ConfusionMetrics, RocCurve, ScoreHistogram};

/// Uniform bins over [0,1] used for every shipped score histogram.
pub const HISTOGRAM_BINS: usize = 50;

/// One metric-table row for a named evaluation dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub metrics: ConfusionMetrics,
    pub auc: f64,
}

/// ROC curve tagged with the dataset it was computed on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedCurve {
    pub dataset: String,
    pub curve: RocCurve,
}

/// Detector evaluation artifact: one metric row and one curve per condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorEval {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub curves: Vec<NamedCurve>,
}

/// Score distribution of one dataset under the grader.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub dataset: String,
    pub mean_score: f64,
    pub histogram: ScoreHistogram,
}

/// Grading evaluation artifact: per-dataset sigmoid-score distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradingEval {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<ScoreDistribution>,
}

/// Rendered report file contents, ready to be written verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub metrics_csv: String,
    pub roc_csv: String,
    pub histogram_csv: String,
    pub summary_json: String,
}

/// Metric table with percents to one decimal and AUC as a fraction to three.
pub fn render_metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("Dataset,Accuracy,Recall,Precision,F1,AUC\n");
    for row in rows {
        let m = &row.metrics;
        out.push_str(&format!(
            "{},{:.1},{:.1},{:.1},{:.1},{:.3}\n",
            row.dataset, m.accuracy, m.recall, m.precision, m.f1, row.auc
        ));
    }
    out
}

pub fn render_roc_csv(curves: &[NamedCurve]) -> String {
    let mut out = String::from("dataset,fpr,tpr,threshold\n");
    for named in curves {
        for p in &named.curve.points {
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                named.dataset, p.fpr, p.tpr, p.threshold
            ));
        }
    }
    out
}

pub fn render_histogram_csv(rows: &[ScoreDistribution]) -> String {
    let mut out = String::from("dataset,bin,lo,hi,count,mass\n");
    for row in rows {
        let bins = row.histogram.counts.len();
        let width = 1.0 / bins as f64;
        let masses = row.histogram.normalized();
        for (i, (&count, mass)) in row.histogram.counts.iter().zip(masses).enumerate() {
            out.push_str(&format!(
                "{},{},{:.2},{:.2},{},{:.6}\n",
                row.dataset,
                i,
                i as f64 * width,
                (i + 1) as f64 * width,
                count,
                mass
            ));
        }
    }
    out
}

/// Key numbers of one run, keyed by the config hash that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub detector_auc: BTreeMap<String, f64>,
    pub grading_mean_score: BTreeMap<String, f64>,
    pub degenerate_precision: BTreeMap<String, bool>,
}

/// Renders all report files, refusing evaluation artifacts whose config hash
/// differs from `expected_hash` or from each other.
pub fn assemble_report(
    expected_hash: &str,
    detector: &DetectorEval,
    grading: &GradingEval,
) -> Result<ReportFiles> {
    for (stage, hash) in [
        ("eval-apn", detector.config_hash.as_str()),
        ("eval-grading", grading.config_hash.as_str()),
    ] {
        if hash != expected_hash {
            return Err(Error::Config(format!(
                "config hash mismatch: {stage} artifact was produced by {hash}, current config is {expected_hash}"
            )));
        }
    }
    let summary = RunSummary {
        config_hash: expected_hash.to_string(),
        seed: detector.seed,
        detector_auc: detector
            .rows
            .iter()
            .map(|r| (r.dataset.clone(), r.auc))
            .collect(),
        grading_mean_score: grading
            .rows
            .iter()
            .map(|r| (r.dataset.clone(), r.mean_score))
            .collect(),
        degenerate_precision: detector
            .rows
            .iter()
            .map(|r| (r.dataset.clone(), r.metrics.degenerate_precision))
            .collect(),
    };
    let mut summary_json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Serde(format!("run summary: {e}")))?;
    summary_json.push('\n');
    Ok(ReportFiles {
        metrics_csv: render_metrics_csv(&detector.rows),
        roc_csv: render_roc_csv(&detector.curves),
        histogram_csv: render_histogram_csv(&grading.rows),
        summary_json,
    })
}
