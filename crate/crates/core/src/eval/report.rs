//! Cohort-level aggregation across models and report emission.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{wilcoxon_signed_rank, EvalConfig, LesionCounts, LesionRates, PatientEval, WilcoxonMethod};
use crate::error::{Error, Result};

/// One model's per-patient evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub name: String,
    pub patients: Vec<PatientEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub min_voxels: usize,
    pub category: String,
    pub n_ref: usize,
    pub detected: usize,
    /// `None` when no reference lesion of the category reaches the size.
    pub ltpr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanPoint {
    pub subject_id: String,
    pub ref_volume_ul: f64,
    pub pred_volume_ul: f64,
    pub mean_ul: f64,
    /// Reference minus prediction.
    pub diff_ul: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub points: Vec<BlandAltmanPoint>,
    pub bias: f64,
    /// Sample standard deviation of the differences.
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl BlandAltman {
    pub fn from_pairs(pairs: &[(String, f64, f64)]) -> Self {
        let points: Vec<BlandAltmanPoint> = pairs
            .iter()
            .map(|(id, r, p)| BlandAltmanPoint {
                subject_id: id.clone(),
                ref_volume_ul: *r,
                pred_volume_ul: *p,
                mean_ul: (r + p) / 2.0,
                diff_ul: r - p,
            })
            .collect();
        let n = points.len() as f64;
        let bias = if points.is_empty() {
            0.0
        } else {
            points.iter().map(|p| p.diff_ul).sum::<f64>() / n
        };
        let sd = if points.len() < 2 {
            0.0
        } else {
            (points.iter().map(|p| (p.diff_ul - bias).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self {
            points,
            bias,
            sd,
            lower: bias - 1.96 * sd,
            upper: bias + 1.96 * sd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    /// Counts pooled over every lesion of the cohort.
    pub pooled: LesionCounts,
    pub pooled_rates: LesionRates,
    pub patient_mean_ltpr: f64,
    pub patient_mean_lfpr: f64,
    pub patient_mean_accuracy: f64,
    /// Mean over patients with a nonzero reference volume.
    pub mean_avd: Option<f64>,
    pub avd_missing: usize,
    /// Unscored predicted components on white-matter lesions, all patients.
    pub wml_excluded: usize,
    pub curve: Vec<CurveRow>,
    pub bland_altman: BlandAltman,
    pub patients: Vec<PatientEval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model_a: String,
    pub model_b: String,
    /// `tpr` or `fpr`, patient-wise.
    pub metric: String,
    pub n_effective: Option<usize>,
    pub w: Option<f64>,
    pub p_two_sided: Option<f64>,
    pub method: Option<WilcoxonMethod>,
    pub significant: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub models: Vec<ModelReport>,
    pub comparisons: Vec<Comparison>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn model_report(m: &ModelEvaluation) -> ModelReport {
    let mut patients = m.patients.clone();
    patients.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));

    let mut pooled = LesionCounts::default();
    for p in &patients {
        pooled.add(&p.counts);
    }
    let mut curve: Vec<CurveRow> = Vec::new();
    for p in &patients {
        for c in &p.curve {
            match curve
                .iter_mut()
                .find(|r| r.min_voxels == c.min_voxels && r.category == c.category)
            {
                Some(r) => {
                    r.n_ref += c.n_ref;
                    r.detected += c.detected;
                }
                None => curve.push(CurveRow {
                    min_voxels: c.min_voxels,
                    category: c.category.clone(),
                    n_ref: c.n_ref,
                    detected: c.detected,
                    ltpr: None,
                }),
            }
        }
    }
    for r in &mut curve {
        r.ltpr = (r.n_ref > 0).then(|| r.detected as f64 / r.n_ref as f64);
    }
    let pairs: Vec<(String, f64, f64)> = patients
        .iter()
        .map(|p| (p.subject_id.clone(), p.ref_volume_ul, p.pred_volume_ul))
        .collect();

    ModelReport {
        name: m.name.clone(),
        pooled_rates: pooled.rates(),
        pooled,
        patient_mean_ltpr: mean(patients.iter().map(|p| p.rates.ltpr)).unwrap_or(1.0),
        patient_mean_lfpr: mean(patients.iter().map(|p| p.rates.lfpr)).unwrap_or(0.0),
        patient_mean_accuracy: mean(patients.iter().map(|p| p.rates.accuracy)).unwrap_or(1.0),
        mean_avd: mean(patients.iter().filter_map(|p| p.avd)),
        avd_missing: patients.iter().filter(|p| p.avd.is_none()).count(),
        wml_excluded: patients.iter().map(|p| p.wml_excluded).sum(),
        curve,
        bland_altman: BlandAltman::from_pairs(&pairs),
        patients,
    }
}

fn compare(a: &ModelReport, b: &ModelReport, metric: &str, alpha: f64) -> Comparison {
    let pick = |m: &ModelReport| -> Vec<f64> {
        m.patients
            .iter()
            .map(|p| if metric == "tpr" { p.rates.ltpr } else { p.rates.lfpr })
            .collect()
    };
    let base = Comparison {
        model_a: a.name.clone(),
        model_b: b.name.clone(),
        metric: metric.to_string(),
        n_effective: None,
        w: None,
        p_two_sided: None,
        method: None,
        significant: false,
        note: None,
    };
    match wilcoxon_signed_rank(&pick(a), &pick(b)) {
        Ok(r) => Comparison {
            n_effective: Some(r.n_effective),
            w: Some(r.w),
            p_two_sided: Some(r.p_two_sided),
            method: Some(r.method),
            significant: r.p_two_sided < alpha,
            ..base
        },
        Err(e) => Comparison {
            note: Some(format!("N.S.: {e}")),
            ..base
        },
    }
}

/// Aggregates every model and runs the pairwise patient-wise tests. All
/// models must cover the same subjects.
pub fn build_report(models: &[ModelEvaluation], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::Validation("report needs at least one model".into()));
    }
    let ids = |m: &ModelEvaluation| m.patients.iter().map(|p| p.subject_id.clone()).collect::<BTreeSet<_>>();
    let reference = ids(&models[0]);
    if reference.len() != models[0].patients.len() {
        return Err(Error::Validation(format!("model {} lists a subject twice", models[0].name)));
    }
    for m in &models[1..] {
        if ids(m) != reference || m.patients.len() != reference.len() {
            return Err(Error::Validation(format!(
                "model {} covers different subjects than model {}",
                m.name, models[0].name
            )));
        }
    }
    let reports: Vec<ModelReport> = models.iter().map(model_report).collect();
    let mut comparisons = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            for metric in ["tpr", "fpr"] {
                comparisons.push(compare(&reports[i], &reports[j], metric, cfg.significance_alpha));
            }
        }
    }
    Ok(EvalReport {
        config: cfg.clone(),
        models: reports,
        comparisons,
    })
}

#[derive(Serialize)]
struct Table1Row<'a> {
    model: &'a str,
    ltpr: f64,
    lfpr: f64,
    avd: Option<f64>,
    accuracy: f64,
    ltpr_patient_mean: f64,
    lfpr_patient_mean: f64,
    n_ref: usize,
    n_pred: usize,
    detected: usize,
    false_positives: usize,
    wml_excluded: usize,
}

#[derive(Serialize)]
struct CurveCsvRow<'a> {
    model: &'a str,
    min_voxels: usize,
    lesion_type: &'a str,
    n_ref: usize,
    detected: usize,
    ltpr: Option<f64>,
}

#[derive(Serialize)]
struct BlandAltmanCsvRow<'a> {
    model: &'a str,
    subject_id: &'a str,
    ref_volume_ul: f64,
    pred_volume_ul: f64,
    mean_ul: f64,
    diff_ul: f64,
    bias: f64,
    lower: f64,
    upper: f64,
}

#[derive(Serialize)]
struct WilcoxonCsvRow<'a> {
    model_a: &'a str,
    model_b: &'a str,
    metric: &'a str,
    n_effective: Option<usize>,
    w: Option<f64>,
    p_two_sided: Option<f64>,
    method: Option<&'a str>,
    significant: bool,
    note: Option<&'a str>,
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let to_io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    for r in rows {
        w.serialize(r).map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `table1.csv`, `ltpr_by_size.csv`,
/// `bland_altman.csv` and `wilcoxon.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let json_path = dir.join("report.json");
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    write_csv(
        &dir.join("table1.csv"),
        report.models.iter().map(|m| Table1Row {
            model: &m.name,
            ltpr: m.pooled_rates.ltpr,
            lfpr: m.pooled_rates.lfpr,
            avd: m.mean_avd,
            accuracy: m.pooled_rates.accuracy,
            ltpr_patient_mean: m.patient_mean_ltpr,
            lfpr_patient_mean: m.patient_mean_lfpr,
            n_ref: m.pooled.n_ref,
            n_pred: m.pooled.n_pred,
            detected: m.pooled.detected,
            false_positives: m.pooled.false_positives,
            wml_excluded: m.wml_excluded,
        }),
    )?;
    write_csv(
        &dir.join("ltpr_by_size.csv"),
        report.models.iter().flat_map(|m| {
            m.curve.iter().map(move |c| CurveCsvRow {
                model: &m.name,
                min_voxels: c.min_voxels,
                lesion_type: &c.category,
                n_ref: c.n_ref,
                detected: c.detected,
                ltpr: c.ltpr,
            })
        }),
    )?;
    write_csv(
        &dir.join("bland_altman.csv"),
        report.models.iter().flat_map(|m| {
            let ba = &m.bland_altman;
            ba.points.iter().map(move |p| BlandAltmanCsvRow {
                model: &m.name,
                subject_id: &p.subject_id,
                ref_volume_ul: p.ref_volume_ul,
                pred_volume_ul: p.pred_volume_ul,
                mean_ul: p.mean_ul,
                diff_ul: p.diff_ul,
                bias: ba.bias,
                lower: ba.lower,
                upper: ba.upper,
            })
        }),
    )?;
    write_csv(
        &dir.join("wilcoxon.csv"),
        report.comparisons.iter().map(|c| WilcoxonCsvRow {
            model_a: &c.model_a,
            model_b: &c.model_b,
            metric: &c.metric,
            n_effective: c.n_effective,
            w: c.w,
            p_two_sided: c.p_two_sided,
            method: c.method.map(|m| match m {
                WilcoxonMethod::Exact => "exact",
                WilcoxonMethod::NormalApprox => "normal_approx",
            }),
            significant: c.significant,
            note: c.note.as_deref(),
        }),
    )?;
    Ok(())
}
