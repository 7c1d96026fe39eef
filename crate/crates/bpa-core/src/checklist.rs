//! Seven-structure dermoscopic checklist scoring.
//!
//! Three major structures count double, four minor structures count single;
//! a lesion whose total reaches [`MALIGNANCY_THRESHOLD`] is graded malignant.

use serde::{Deserialize, Serialize};

/// Total score at or above this value grades the lesion malignant.
pub const MALIGNANCY_THRESHOLD: u8 = 3;

/// Presence flags for the seven dermoscopic structures.
///
/// The first three are major criteria (weight 2), the rest minor (weight 1).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChecklistAssessment {
    pub atypical_pigment_network: bool,
    pub blue_whitish_veil: bool,
    pub atypical_vascular_pattern: bool,
    pub irregular_streaks: bool,
    pub irregular_pigmentation: bool,
    pub irregular_dots_globules: bool,
    pub regression_structures: bool,
}

impl ChecklistAssessment {
    /// Flags in declaration order: majors first, then minors.
    pub fn flags(&self) -> [bool; 7] {
        [
            self.atypical_pigment_network,
            self.blue_whitish_veil,
            self.atypical_vascular_pattern,
            self.irregular_streaks,
            self.irregular_pigmentation,
            self.irregular_dots_globules,
            self.regression_structures,
        ]
    }

    /// Build from a 7-bit mask, bit i = flag i in `flags()` order.
    pub fn from_bits(bits: u8) -> Self {
        debug_assert!(bits < 128);
        ChecklistAssessment {
            atypical_pigment_network: bits & 1 != 0,
            blue_whitish_veil: bits & 2 != 0,
            atypical_vascular_pattern: bits & 4 != 0,
            irregular_streaks: bits & 8 != 0,
            irregular_pigmentation: bits & 16 != 0,
            irregular_dots_globules: bits & 32 != 0,
            regression_structures: bits & 64 != 0,
        }
    }

    pub fn bits(&self) -> u8 {
        self.flags()
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &f)| acc | (u8::from(f) << i))
    }

    pub fn major_count(&self) -> u8 {
        u8::from(self.atypical_pigment_network)
            + u8::from(self.blue_whitish_veil)
            + u8::from(self.atypical_vascular_pattern)
    }

    pub fn minor_count(&self) -> u8 {
        u8::from(self.irregular_streaks)
            + u8::from(self.irregular_pigmentation)
            + u8::from(self.irregular_dots_globules)
            + u8::from(self.regression_structures)
    }

    /// All 128 possible assessments, in bit order.
    pub fn all() -> impl Iterator<Item = ChecklistAssessment> {
        (0u8..128).map(ChecklistAssessment::from_bits)
    }
}

/// Weighted total: 2 per major structure present, 1 per minor. Range 0..=10.
pub fn total_score(a: &ChecklistAssessment) -> u8 {
    2 * a.major_count() + a.minor_count()
}

/// Malignancy decision: total score at or above [`MALIGNANCY_THRESHOLD`].
pub fn is_malignant(a: &ChecklistAssessment) -> bool {
    total_score(a) >= MALIGNANCY_THRESHOLD
}
