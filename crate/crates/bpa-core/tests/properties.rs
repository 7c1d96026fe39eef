//! Property-based checks over the pure library layers: scoring, ranking
//! metrics, augmentation geometry, manifest serialization, and the scalar
//! helpers the pipeline leans on.

use std::collections::BTreeSet;

use ndarray::Array3;
use proptest::prelude::*;

use bpa_core::augment::{augment, AugmentPolicy};
use bpa_core::checklist::{is_malignant, total_score, ChecklistAssessment};
use bpa_core::dataset::scaled_count;
use bpa_core::image::{ImageTensor, Range};
use bpa_core::manifest::{
    read_manifest, write_manifest, ArtifactFlag, Diagnosis, ManifestRecord, Provenance,
};
use bpa_core::metrics::{
    auc, class_weights, confusion_counts, roc_curve, weighted_bce, ScoreHistogram,
};
use bpa_core::rng::seeded;
use bpa_core::transfer::cycle_loss;

/// Scores on a coarse grid (ties are common) with at least one label of
/// each class.
fn labeled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((0u8..=10, any::<bool>()), 2..60)
        .prop_filter("need both classes", |v| {
            v.iter().any(|(_, l)| *l) && v.iter().any(|(_, l)| !*l)
        })
        .prop_map(|v| {
            v.into_iter()
                .map(|(s, l)| (f64::from(s) / 10.0, l))
                .unzip()
        })
}

fn unit_image(max_side: usize) -> impl Strategy<Value = ImageTensor> {
    (4..=max_side, 4..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(0u8..=255, 3 * h * w).prop_map(move |px| {
            let data: Vec<f64> = px.into_iter().map(|v| f64::from(v) / 255.0).collect();
            ImageTensor::new(Array3::from_shape_vec((3, h, w), data).unwrap(), Range::Unit)
        })
    })
}

fn record_strategy() -> impl Strategy<Value = ManifestRecord> {
    let provenance = prop_oneof![
        Just(Provenance::Real),
        Just(Provenance::GeneratedPhase1),
        Just(Provenance::GeneratedPhase2),
    ];
    (
        "[a-f0-9]{8,16}",
        "[a-z]{1,8}",
        prop::option::of(any::<bool>()),
        prop::option::of(prop_oneof![Just(Diagnosis::Nevus), Just(Diagnosis::Melanoma)]),
        provenance,
        "[a-f0-9]{8}",
        prop::collection::btree_set(prop::sample::select(ArtifactFlag::ALL.to_vec()), 0..=4),
        prop::option::of(0u8..128),
    )
        .prop_map(
            |(id, stem, label_structure, label_diagnosis, provenance, src, flags, bits)| {
                // Source ids are forbidden on real images and required on
                // phase-2 ones.
                let source_id = match provenance {
                    Provenance::Real => None,
                    Provenance::GeneratedPhase1 => None,
                    Provenance::GeneratedPhase2 => Some(src),
                };
                ManifestRecord {
                    id,
                    path: format!("{stem}.png"),
                    label_structure,
                    label_diagnosis,
                    provenance,
                    source_id,
                    artifact_flags: flags,
                    checklist: bits.map(ChecklistAssessment::from_bits),
                }
            },
        )
}

proptest! {
    #[test]
    fn checklist_score_counts_majors_twice(bits in 0u8..128) {
        let a = ChecklistAssessment::from_bits(bits);
        let flags = a.flags();
        let majors = flags[..3].iter().filter(|&&f| f).count() as u8;
        let minors = flags[3..].iter().filter(|&&f| f).count() as u8;
        prop_assert_eq!(total_score(&a), 2 * majors + minors);
        prop_assert_eq!(a.bits(), bits);
    }

    #[test]
    fn checklist_score_is_monotone_in_findings(bits in 0u8..128, extra in 0u32..7) {
        let base = ChecklistAssessment::from_bits(bits);
        let grown = ChecklistAssessment::from_bits(bits | (1 << extra));
        prop_assert!(total_score(&grown) >= total_score(&base));
        if is_malignant(&base) {
            prop_assert!(is_malignant(&grown));
        }
    }

    #[test]
    fn auc_matches_pairwise_win_probability((scores, labels) in labeled_scores()) {
        let got = auc(&scores, &labels).unwrap();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li { continue; }
            for (j, &lj) in labels.iter().enumerate() {
                if lj { continue; }
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        prop_assert!((got - wins / pairs).abs() <= 1e-9, "auc {} vs pairwise {}", got, wins / pairs);
    }

    #[test]
    fn roc_curve_integrates_to_its_auc((scores, labels) in labeled_scores()) {
        let curve = roc_curve(&scores, &labels).unwrap();
        let mut area = 0.0;
        for w in curve.points.windows(2) {
            area += (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0;
        }
        prop_assert!((area - curve.auc).abs() <= 1e-12);
    }

    #[test]
    fn roc_curve_runs_from_origin_to_saturation((scores, labels) in labeled_scores()) {
        let curve = roc_curve(&scores, &labels).unwrap();
        let first = curve.points.first().unwrap();
        let last = curve.points.last().unwrap();
        prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in curve.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }

    #[test]
    fn recall_never_rises_with_the_threshold(
        (scores, labels) in labeled_scores(),
        t1 in 0u8..=10,
        t2 in 0u8..=10,
    ) {
        let (lo, hi) = (f64::from(t1.min(t2)) / 10.0, f64::from(t1.max(t2)) / 10.0);
        let at = |t: f64| {
            let c = confusion_counts(&scores, &labels, t);
            c.tp as f64 / (c.tp + c.fn_) as f64
        };
        prop_assert!(at(hi) <= at(lo) + 1e-12);
    }

    #[test]
    fn class_weights_balance_total_mass(n_neg in 1usize..10_000, n_pos in 1usize..10_000) {
        let (w_neg, w_pos) = class_weights(n_neg, n_pos).unwrap();
        let neg_mass = w_neg * n_neg as f64;
        let pos_mass = w_pos * n_pos as f64;
        prop_assert!((neg_mass - pos_mass).abs() <= 1e-9 * neg_mass.max(pos_mass));
        if n_neg == n_pos {
            prop_assert_eq!((w_neg, w_pos), (1.0, 1.0));
        }
    }

    #[test]
    fn weighted_bce_is_finite_and_bounded(
        (scores, labels) in labeled_scores(),
        w0 in 0.1f64..30.0,
        w1 in 0.1f64..30.0,
    ) {
        let loss = weighted_bce(&scores, &labels, (w0, w1)).unwrap();
        // The clamp keeps every per-sample term below w * -ln(1e-7).
        let cap = w0.max(w1) * -(1e-7f64.ln());
        prop_assert!(loss.is_finite() && loss >= 0.0 && loss <= cap);
    }

    #[test]
    fn histogram_mass_is_conserved((scores, _) in labeled_scores()) {
        let h = ScoreHistogram::new(&scores, 50);
        prop_assert_eq!(h.total(), scores.len() as u64);
        let mass: f64 = h.normalized().iter().sum();
        prop_assert!((mass - 1.0).abs() <= 1e-12);
        prop_assert_eq!(h.l1_distance(&h), 0.0);
    }

    #[test]
    fn histogram_distance_is_symmetric((a, _) in labeled_scores(), (b, _) in labeled_scores()) {
        let ha = ScoreHistogram::new(&a, 50);
        let hb = ScoreHistogram::new(&b, 50);
        prop_assert_eq!(ha.l1_distance(&hb), hb.l1_distance(&ha));
    }

    #[test]
    fn scaled_count_rounds_but_never_empties(full in 1usize..1_000_000, scale_pm in 1u32..=1000) {
        let scale = f64::from(scale_pm) / 1000.0;
        let got = scaled_count(full, scale);
        prop_assert!(got >= 1);
        prop_assert!((got as f64 - full as f64 * scale).abs() <= 0.5 || got == 1);
        prop_assert_eq!(scaled_count(full, 1.0), full);
        prop_assert!(scaled_count(full + 1, scale) >= got);
    }

    #[test]
    fn cycle_loss_is_mean_absolute_difference(a in unit_image(12), seed in any::<u64>()) {
        let mut rng = seeded(seed, "prop/cycle");
        let mut b = a.clone();
        for v in b.data.iter_mut() {
            *v = (*v + rng.random_range(-0.3..0.3)).clamp(0.0, 1.0);
        }
        let got = cycle_loss(&a, &b).unwrap();
        let oracle: f64 = a.data.iter().zip(b.data.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>()
            / a.data.len() as f64;
        prop_assert!((got - oracle).abs() <= 1e-12);
        prop_assert_eq!(cycle_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn range_conversion_round_trips(img in unit_image(10)) {
        let back = img.to_range(Range::Symmetric).to_range(Range::Unit);
        for (x, y) in img.data.iter().zip(back.data.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let sym = img.to_range(Range::Symmetric);
        for &v in sym.data.iter() {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmented_views_have_requested_shape_and_range(
        img in unit_image(20),
        input_size in 4usize..=16,
        rand_n in 0usize..=3,
        seed in any::<u64>(),
    ) {
        let policy = AugmentPolicy { rand_n, ..AugmentPolicy::default() };
        let mut rng = seeded(seed, "prop/augment");
        let view = augment(&img, input_size, &policy, &mut rng);
        prop_assert_eq!(view.data.shape(), &[3, input_size, input_size]);
        prop_assert_eq!(view.range, Range::Unit);
        for &v in view.data.iter() {
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&v), "value {} outside unit range", v);
        }
    }

    #[test]
    fn manifest_round_trips_through_jsonl(records in prop::collection::vec(record_strategy(), 0..12)) {
        // Manifest ids must be unique within a file.
        let mut seen = BTreeSet::new();
        let records: Vec<ManifestRecord> =
            records.into_iter().filter(|r| seen.insert(r.id.clone())).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &records).unwrap();
        let back = read_manifest(&path).unwrap();
        prop_assert_eq!(back, records);
    }
}
