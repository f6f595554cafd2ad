//! Lesion-wise evaluation: components, matching, rates, volume agreement,
//! detection-versus-size curves and paired significance tests.

mod components;
mod metrics;
mod report;
mod wilcoxon;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use components::{connected_components, filter_min_size, label_components, Connectivity, LesionComponent};
pub use metrics::{
    avd, lesion_counts, lesion_metrics, majority_class, match_lesions, total_volume_ul, LesionCounts, LesionRates,
    Matching,
};
pub use report::{
    build_report, write_report, BlandAltman, BlandAltmanPoint, Comparison, CurveRow, EvalReport, ModelEvaluation,
    ModelReport,
};
pub use wilcoxon::{wilcoxon_signed_rank, wilcoxon_signed_rank_with, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N};

use crate::error::{Error, Result};
use crate::volume::{cl_code, Volume};

/// Cortical lesion morphology. Type I is leukocortical; II is intracortical;
/// III and IV are subpial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LesionType {
    I,
    II,
    III,
    IV,
}

impl LesionType {
    pub const ALL: [LesionType; 4] = [LesionType::I, LesionType::II, LesionType::III, LesionType::IV];

    /// The cortical-lesion label code this type is annotated with.
    pub fn class(self) -> u8 {
        match self {
            LesionType::I => cl_code::LEUKOCORTICAL,
            _ => cl_code::SUBPIAL_INTRACORTICAL,
        }
    }
}

impl fmt::Display for LesionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LesionType::I => "I",
            LesionType::II => "II",
            LesionType::III => "III",
            LesionType::IV => "IV",
        })
    }
}

/// Ground-truth type of the reference lesion containing `voxel`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeAnnotation {
    pub voxel: usize,
    pub lesion_type: LesionType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub min_lesion_voxels: usize,
    pub connectivity: Connectivity,
    pub significance_alpha: f64,
    /// Minimum sizes at which the detection-versus-size curve is evaluated.
    pub curve_min_voxels: Vec<usize>,
    /// Leave out of the scoring any predicted component that matches no
    /// reference lesion but overlaps a white-matter lesion.
    pub exclude_wml_overlaps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_lesion_voxels: 6,
            connectivity: Connectivity::TwentySix,
            significance_alpha: 0.05,
            curve_min_voxels: vec![6, 12, 24, 48],
            exclude_wml_overlaps: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_lesion_voxels < 1 {
            return Err(Error::Validation("min_lesion_voxels must be ≥ 1".into()));
        }
        if !(self.significance_alpha > 0.0 && self.significance_alpha < 1.0) {
            return Err(Error::Validation("significance_alpha must lie in (0, 1)".into()));
        }
        if self.curve_min_voxels.contains(&0) {
            return Err(Error::Validation("curve thresholds must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Detection counts of one lesion category at one minimum size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveCount {
    pub min_voxels: usize,
    /// `I`..`IV`, `unknown` for unannotated lesions, or `all`.
    pub category: String,
    pub n_ref: usize,
    pub detected: usize,
}

/// Evaluation of one subject's prediction against its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEval {
    pub subject_id: String,
    pub counts: LesionCounts,
    pub rates: LesionRates,
    pub ref_volume_ul: f64,
    pub pred_volume_ul: f64,
    pub avd: Option<f64>,
    pub curve: Vec<CurveCount>,
    /// Unmatched predicted components left unscored because they overlap a
    /// white-matter lesion.
    pub wml_excluded: usize,
}

/// Scores one prediction. Both maps are componentized, filtered at the
/// configured minimum size and matched by any-voxel overlap. `wml` is the
/// white-matter lesion mask, used by [`EvalConfig::exclude_wml_overlaps`].
pub fn evaluate_patient(
    subject_id: &str,
    reference: &Volume,
    predicted: &Volume,
    wml: Option<&Volume>,
    types: &[TypeAnnotation],
    cfg: &EvalConfig,
) -> Result<PatientEval> {
    cfg.validate()?;
    if !reference.header.same_geometry(&predicted.header) {
        return Err(Error::Geometry(format!(
            "{subject_id}: prediction dims {:?} differ from reference {:?}",
            predicted.header.dims, reference.header.dims
        )));
    }
    let n = reference.header.voxel_count();
    let ref_all = connected_components(reference, cfg.connectivity)?;
    let pred_all = connected_components(predicted, cfg.connectivity)?;

    if let Some(w) = wml {
        if !reference.header.same_geometry(&w.header) {
            return Err(Error::Geometry(format!(
                "{subject_id}: WML mask dims {:?} differ from reference {:?}",
                w.header.dims, reference.header.dims
            )));
        }
    }

    let ref_f = filter_min_size(&ref_all, cfg.min_lesion_voxels);
    let mut pred_f = filter_min_size(&pred_all, cfg.min_lesion_voxels);
    let mut m = match_lesions(n, &ref_f, &pred_f);
    let mut wml_excluded = 0;
    if let (true, Some(mask)) = (cfg.exclude_wml_overlaps, wml.and_then(Volume::as_u8)) {
        // Dropping unmatched components leaves every reference match intact.
        let keep: Vec<bool> = pred_f
            .iter()
            .zip(&m.pred_matched)
            .map(|(c, &hit)| hit || !c.voxels.iter().any(|&v| mask[v] != 0))
            .collect();
        wml_excluded = keep.iter().filter(|&&k| !k).count();
        if wml_excluded > 0 {
            pred_f = pred_f.into_iter().zip(&keep).filter(|(_, &k)| k).map(|(c, _)| c).collect();
            m = match_lesions(n, &ref_f, &pred_f);
        }
    }
    let counts = lesion_counts(&ref_f, &pred_f, &m);
    let ref_volume_ul = total_volume_ul(&ref_f);
    let pred_volume_ul = total_volume_ul(&pred_f);

    let mut curve = Vec::new();
    for &t in &cfg.curve_min_voxels {
        let r = filter_min_size(&ref_all, t);
        let p = filter_min_size(&pred_all, t);
        let m = match_lesions(n, &r, &p);
        let mut by_cat: Vec<CurveCount> = LesionType::ALL
            .iter()
            .map(|lt| lt.to_string())
            .chain(["unknown".to_string(), "all".to_string()])
            .map(|category| CurveCount {
                min_voxels: t,
                category,
                n_ref: 0,
                detected: 0,
            })
            .collect();
        for (comp, &det) in r.iter().zip(&m.ref_detected) {
            let slot = match component_type(comp, types) {
                Some(lt) => lt as usize,
                None => LesionType::ALL.len(),
            };
            for s in [slot, by_cat.len() - 1] {
                by_cat[s].n_ref += 1;
                by_cat[s].detected += det as usize;
            }
        }
        curve.extend(by_cat);
    }

    Ok(PatientEval {
        subject_id: subject_id.to_string(),
        rates: counts.rates(),
        counts,
        ref_volume_ul,
        pred_volume_ul,
        avd: avd(ref_volume_ul, pred_volume_ul),
        curve,
        wml_excluded,
    })
}

fn component_type(comp: &LesionComponent, types: &[TypeAnnotation]) -> Option<LesionType> {
    types
        .iter()
        .find(|t| comp.voxels.binary_search(&t.voxel).is_ok())
        .map(|t| t.lesion_type)
}
