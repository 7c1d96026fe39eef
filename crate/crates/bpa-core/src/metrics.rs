//! Threshold-free and thresholded classifier metrics.
//!
//! The AUC here is the rank statistic (probability a random positive
//! outscores a random negative, ties half-counted). Both `auc` and the ROC
//! trapezoid reduce to the same integer numerator over `2·P·N`, so the two
//! agree to the last bit; tests still cross-check against a brute-force
//! pairwise oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sigmoid scores are clamped into [EPS, 1-EPS] before any log is taken.
pub const SCORE_CLAMP_EPS: f64 = 1e-7;

fn validate_binary_input(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Runtime(format!(
            "scores/labels length mismatch: {} vs {}",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Runtime("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Runtime(
            "metric requires both classes present".into(),
        ));
    }
    Ok((neg, pos))
}

/// Rank-statistic AUC with tie averaging.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (neg, pos) = validate_binary_input(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 2*average-rank over positives, exact in integers: a tie group
    // spanning 1-based ranks lo..=hi contributes p_group * (lo + hi).
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let p_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        let lo = (i + 1) as u128;
        let hi = (j + 1) as u128;
        twice_rank_sum += p_group * (lo + hi);
        i = j + 1;
    }
    let p = pos as u128;
    let n = neg as u128;
    let numerator = twice_rank_sum - p * (p + 1);
    Ok(numerator as f64 / (2 * p * n) as f64)
}

/// One operating point on the ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Decision threshold; the sentinel endpoints are +/- infinity, which
    /// JSON cannot hold as numbers, hence the string fallback.
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Full ROC sweep plus its trapezoid area.
mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "threshold must be a number, \"inf\", or \"-inf\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve with one threshold per distinct score plus sentinels at both
/// ends. A sample is predicted positive when its score >= threshold, so the
/// sweep walks from (0,0) at +inf down to (1,1).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (neg, pos) = validate_binary_input(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u128, 0u128);
    // Trapezoid numerator over 2*P*N, kept in integers so the area is the
    // same rational number the rank statistic produces.
    let mut twice_area_num: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let p_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        let n_group = (j - i + 1) as u128 - p_group;
        twice_area_num += n_group * (2 * tp + p_group);
        tp += p_group;
        fp += n_group;
        points.push(RocPoint {
            threshold: scores[order[i]],
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
        i = j + 1;
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    let auc = twice_area_num as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok(RocCurve { points, auc })
}

/// Raw confusion counts at a fixed threshold (predict positive iff score >=
/// threshold).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

pub fn confusion_counts(scores: &[f64], labels: &[bool], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// Thresholded metrics in percent, as reported in the result tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// True when no sample was predicted positive, making precision (and F1)
    /// undefined; both are then reported as 0.
    pub degenerate_precision: bool,
}

impl ConfusionCounts {
    pub fn metrics(&self) -> ConfusionMetrics {
        let total = (self.tp + self.fp + self.tn + self.fn_) as f64;
        let accuracy = 100.0 * (self.tp + self.tn) as f64 / total;
        let pos = (self.tp + self.fn_) as f64;
        let recall = if pos > 0.0 {
            100.0 * self.tp as f64 / pos
        } else {
            0.0
        };
        let predicted_pos = self.tp + self.fp;
        let degenerate = predicted_pos == 0;
        let precision = if degenerate {
            0.0
        } else {
            100.0 * self.tp as f64 / predicted_pos as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ConfusionMetrics {
            accuracy,
            recall,
            precision,
            f1,
            degenerate_precision: degenerate,
        }
    }
}

/// Standard confusion metrics at `threshold` (0.5 in all shipped reports).
pub fn confusion_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionMetrics> {
    validate_binary_input(scores, labels)?;
    Ok(confusion_counts(scores, labels, threshold).metrics())
}

/// Sensitivity/specificity pair used for grader reporting.
pub fn sensitivity_specificity(scores: &[f64], labels: &[bool], threshold: f64) -> Result<(f64, f64)> {
    validate_binary_input(scores, labels)?;
    let c = confusion_counts(scores, labels, threshold);
    let sens = c.tp as f64 / (c.tp + c.fn_) as f64;
    let spec = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok((100.0 * sens, 100.0 * spec))
}

/// Inverse-frequency class weights: w_c = (n_neg + n_pos) / (2 * n_c).
/// Balanced data yields (1, 1); the minority class is weighted up so both
/// classes contribute equal total mass.
pub fn class_weights(n_neg: usize, n_pos: usize) -> Result<(f64, f64)> {
    if n_neg == 0 || n_pos == 0 {
        return Err(Error::Runtime(format!(
            "class_weights requires both classes, got neg={n_neg} pos={n_pos}"
        )));
    }
    let total = (n_neg + n_pos) as f64;
    Ok((total / (2.0 * n_neg as f64), total / (2.0 * n_pos as f64)))
}

/// Mean class-weighted binary cross-entropy over sigmoid scores.
///
/// Scores are clamped to [1e-7, 1-1e-7] before the logs, so perfect scores
/// stay finite.
pub fn weighted_bce(scores: &[f64], labels: &[bool], weights: (f64, f64)) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Runtime(format!(
            "weighted_bce needs matching nonempty batches, got {} scores / {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if weights.0 <= 0.0 || weights.1 <= 0.0 {
        return Err(Error::Runtime("class weights must be positive".into()));
    }
    let mut sum = 0.0;
    for (&s, &l) in scores.iter().zip(labels) {
        let p = s.clamp(SCORE_CLAMP_EPS, 1.0 - SCORE_CLAMP_EPS);
        let (w, nll) = if l {
            (weights.1, -p.ln())
        } else {
            (weights.0, -(1.0 - p).ln())
        };
        sum += w * nll;
    }
    Ok(sum / scores.len() as f64)
}

/// Fixed-width histogram of scores over [0, 1].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub counts: Vec<u64>,
}

impl ScoreHistogram {
    pub fn new(scores: &[f64], bins: usize) -> Self {
        assert!(bins > 0, "histogram needs at least one bin");
        let mut counts = vec![0u64; bins];
        for &s in scores {
            let clamped = s.clamp(0.0, 1.0);
            let idx = ((clamped * bins as f64) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        ScoreHistogram { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bin masses summing to 1 (all-zero if the histogram is empty).
    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect()
    }

    /// L1 distance between normalized histograms. Panics on bin mismatch.
    pub fn l1_distance(&self, other: &ScoreHistogram) -> f64 {
        assert_eq!(
            self.counts.len(),
            other.counts.len(),
            "histograms must share binning"
        );
        self.normalized()
            .iter()
            .zip(other.normalized())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

pub fn mean(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(P*N) oracle: count positive-over-negative wins, half-count ties.
    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_hand_example() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.75);
        assert_eq!(pairwise_auc(&scores, &labels), 0.75);
    }

    #[test]
    fn auc_perfect_separation_is_one() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [true, true, false, false];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let scores = [0.5; 6];
        let labels = [true, false, true, false, false, true];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_rejects_single_class() {
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn roc_trapezoid_equals_rank_auc() {
        let scores = [0.1, 0.5, 0.5, 0.5, 0.7, 0.9, 0.2, 0.9];
        let labels = [false, true, false, true, true, true, false, false];
        let curve = roc_curve(&scores, &labels).unwrap();
        let rank = auc(&scores, &labels).unwrap();
        assert_eq!(curve.auc, rank);
        // Trapezoid recomputed from the returned points agrees too.
        let mut area = 0.0;
        for w in curve.points.windows(2) {
            area += (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0;
        }
        assert!((area - rank).abs() < 1e-13, "area {area} vs auc {rank}");
    }

    #[test]
    fn roc_passes_through_corners() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [true, true, false, false];
        let curve = roc_curve(&scores, &labels).unwrap();
        assert_eq!(curve.points.first().unwrap().fpr, 0.0);
        assert_eq!(curve.points.first().unwrap().tpr, 0.0);
        assert!(curve
            .points
            .iter()
            .any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(curve.points.last().unwrap().fpr, 1.0);
        assert_eq!(curve.points.last().unwrap().tpr, 1.0);
    }

    #[test]
    fn roc_all_ties_gives_single_step() {
        let scores = [0.3; 4];
        let labels = [true, false, true, false];
        let curve = roc_curve(&scores, &labels).unwrap();
        assert_eq!(curve.auc, 0.5);
        // +inf sentinel, the single distinct score, -inf sentinel.
        assert_eq!(curve.points.len(), 3);
    }

    #[test]
    fn confusion_all_positive_predictor() {
        let scores = [0.9, 0.8, 0.7, 0.6];
        let labels = [true, false, true, false];
        let m = confusion_metrics(&scores, &labels, 0.0).unwrap();
        assert_eq!(m.accuracy, 50.0);
        assert_eq!(m.recall, 100.0);
        assert_eq!(m.precision, 50.0);
        assert!((m.f1 - 66.7).abs() < 0.05);
        assert!(!m.degenerate_precision);
    }

    #[test]
    fn confusion_flags_degenerate_precision() {
        let scores = [0.4, 0.3];
        let labels = [true, false];
        let m = confusion_metrics(&scores, &labels, 1.01).unwrap();
        assert!(m.degenerate_precision);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn perfect_classifier_scores_hundred_everywhere() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [true, true, false, false];
        let m = confusion_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!(
            (m.accuracy, m.recall, m.precision, m.f1),
            (100.0, 100.0, 100.0, 100.0)
        );
    }

    #[test]
    fn class_weights_balanced_is_unit() {
        assert_eq!(class_weights(100, 100).unwrap(), (1.0, 1.0));
        assert_eq!(class_weights(1, 1).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn class_weights_imbalanced_case() {
        let (w_neg, w_pos) = class_weights(10_000, 230).unwrap();
        assert!((w_neg - 0.5115).abs() < 5e-5, "w_neg {w_neg}");
        assert!((w_pos - 22.2391).abs() < 5e-5, "w_pos {w_pos}");
        // Both classes contribute the same total mass.
        let lhs = w_neg * 10_000.0;
        let rhs = w_pos * 230.0;
        assert!((lhs - rhs).abs() / rhs < 1e-12);
    }

    #[test]
    fn class_weights_rejects_empty_class() {
        assert!(class_weights(0, 5).is_err());
        assert!(class_weights(5, 0).is_err());
    }

    #[test]
    fn weighted_bce_hand_value() {
        // mean(1*(-ln 0.8), 2*(-ln 0.8)) = 1.5 * (-ln 0.8)
        let loss = weighted_bce(&[0.8, 0.2], &[true, false], (2.0, 1.0)).unwrap();
        let expect = 1.5 * -(0.8f64.ln());
        assert!((loss - expect).abs() < 1e-12, "loss {loss} vs {expect}");
        assert!((loss - 0.3347).abs() < 1e-4);
    }

    #[test]
    fn weighted_bce_unit_weights_is_plain_bce() {
        let scores = [0.9, 0.3, 0.5];
        let labels = [true, false, true];
        let weighted = weighted_bce(&scores, &labels, (1.0, 1.0)).unwrap();
        let plain: f64 = scores
            .iter()
            .zip(&labels)
            .map(|(&s, &l)| if l { -s.ln() } else { -(1.0 - s).ln() })
            .sum::<f64>()
            / 3.0;
        assert!((weighted - plain).abs() < 1e-12);
    }

    #[test]
    fn weighted_bce_clamps_perfect_scores() {
        let loss = weighted_bce(&[1.0], &[true], (1.0, 3.0)).unwrap();
        let bound = 3.0 * -(1.0 - SCORE_CLAMP_EPS as f64).ln();
        assert!(loss <= bound + 1e-15);
        assert!(loss.is_finite());
    }

    #[test]
    fn histogram_single_score_lands_in_last_bin() {
        let h = ScoreHistogram::new(&[0.999], 10);
        assert_eq!(h.counts[9], 1);
        assert_eq!(h.total(), 1);
        let norm = h.normalized();
        assert_eq!(norm[9], 1.0);
    }

    #[test]
    fn histogram_normalization_sums_to_one() {
        let scores: Vec<f64> = (0..250).map(|i| i as f64 / 250.0).collect();
        let h = ScoreHistogram::new(&scores, 50);
        let sum: f64 = h.normalized().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn histogram_l1_distance_orders_similarity() {
        let low = ScoreHistogram::new(&[0.1, 0.15, 0.2], 10);
        let low2 = ScoreHistogram::new(&[0.12, 0.18, 0.22], 10);
        let high = ScoreHistogram::new(&[0.9, 0.95, 0.85], 10);
        assert!(low.l1_distance(&low2) < low.l1_distance(&high));
        assert_eq!(low.l1_distance(&low), 0.0);
    }

    #[test]
    fn roc_curve_round_trips_through_json_including_sentinels() {
        let curve = roc_curve(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        let json = serde_json::to_string(&curve).unwrap();
        let back: RocCurve = serde_json::from_str(&json).unwrap();
        assert_eq!(back.points.first().unwrap().threshold, f64::INFINITY);
        assert_eq!(back.points.last().unwrap().threshold, f64::NEG_INFINITY);
        assert_eq!(back.auc, curve.auc);
        for (a, b) in curve.points.iter().zip(&back.points) {
            assert_eq!(a, b);
        }
    }
}
