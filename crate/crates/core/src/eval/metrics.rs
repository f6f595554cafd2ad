//! Lesion matching and the lesion-wise detection metrics.

use serde::{Deserialize, Serialize};

use super::components::LesionComponent;
use crate::volume::cl_code;

/// Overlap bookkeeping between reference and predicted components.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// `ref_detected[i]`: some predicted component overlaps reference `i`.
    pub ref_detected: Vec<bool>,
    /// `pred_matched[j]`: predicted `j` overlaps some reference component.
    pub pred_matched: Vec<bool>,
    /// Per reference component, overlapping predicted voxel counts of
    /// class 1 and class 2.
    pub overlap_classes: Vec<[usize; 2]>,
}

/// Class-agnostic any-voxel overlap matching. Component positions in the
/// slices index the result; many-to-many overlaps are allowed.
pub fn match_lesions(n_voxels: usize, reference: &[LesionComponent], predicted: &[LesionComponent]) -> Matching {
    const NONE: u32 = u32::MAX;
    let mut owner = vec![NONE; n_voxels];
    for (j, p) in predicted.iter().enumerate() {
        for &v in &p.voxels {
            owner[v] = j as u32;
        }
    }
    let mut ref_detected = vec![false; reference.len()];
    let mut pred_matched = vec![false; predicted.len()];
    let mut overlap_classes = vec![[0usize; 2]; reference.len()];
    for (i, r) in reference.iter().enumerate() {
        for &v in &r.voxels {
            let j = owner[v];
            if j == NONE {
                continue;
            }
            ref_detected[i] = true;
            pred_matched[j as usize] = true;
            match predicted[j as usize].class {
                cl_code::LEUKOCORTICAL => overlap_classes[i][0] += 1,
                _ => overlap_classes[i][1] += 1,
            }
        }
    }
    Matching {
        ref_detected,
        pred_matched,
        overlap_classes,
    }
}

/// Majority class among overlapping predicted voxels; ties go to class 1.
pub fn majority_class(overlap: [usize; 2]) -> u8 {
    if overlap[1] > overlap[0] {
        cl_code::SUBPIAL_INTRACORTICAL
    } else {
        cl_code::LEUKOCORTICAL
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LesionCounts {
    pub n_ref: usize,
    pub n_pred: usize,
    pub detected: usize,
    pub false_positives: usize,
    pub correctly_classified: usize,
}

impl LesionCounts {
    pub fn add(&mut self, o: &LesionCounts) {
        self.n_ref += o.n_ref;
        self.n_pred += o.n_pred;
        self.detected += o.detected;
        self.false_positives += o.false_positives;
        self.correctly_classified += o.correctly_classified;
    }

    pub fn rates(&self) -> LesionRates {
        LesionRates {
            ltpr: ratio_or(self.detected, self.n_ref, 1.0),
            lfpr: ratio_or(self.false_positives, self.n_pred, 0.0),
            accuracy: ratio_or(self.correctly_classified, self.detected, 1.0),
            ltpr_empty: self.n_ref == 0,
            lfpr_empty: self.n_pred == 0,
            accuracy_empty: self.detected == 0,
        }
    }
}

/// LTPR, LFPR and classification accuracy. Empty denominators give the
/// conventional values (1, 0, 1) and set the matching `*_empty` flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionRates {
    pub ltpr: f64,
    pub lfpr: f64,
    pub accuracy: f64,
    pub ltpr_empty: bool,
    pub lfpr_empty: bool,
    pub accuracy_empty: bool,
}

fn ratio_or(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

pub fn lesion_counts(reference: &[LesionComponent], predicted: &[LesionComponent], m: &Matching) -> LesionCounts {
    let detected = m.ref_detected.iter().filter(|&&d| d).count();
    let correctly_classified = reference
        .iter()
        .zip(&m.ref_detected)
        .zip(&m.overlap_classes)
        .filter(|((r, &d), &ov)| d && majority_class(ov) == r.class)
        .count();
    LesionCounts {
        n_ref: reference.len(),
        n_pred: predicted.len(),
        detected,
        false_positives: m.pred_matched.iter().filter(|&&p| !p).count(),
        correctly_classified,
    }
}

pub fn lesion_metrics(reference: &[LesionComponent], predicted: &[LesionComponent], m: &Matching) -> LesionRates {
    lesion_counts(reference, predicted, m).rates()
}

/// Absolute volume difference `|ref − pred| / ref`; `None` when the
/// reference volume is zero.
pub fn avd(ref_volume_ul: f64, pred_volume_ul: f64) -> Option<f64> {
    if ref_volume_ul > 0.0 {
        Some((ref_volume_ul - pred_volume_ul).abs() / ref_volume_ul)
    } else {
        None
    }
}

pub fn total_volume_ul(components: &[LesionComponent]) -> f64 {
    components.iter().map(|c| c.volume_ul).sum()
}
