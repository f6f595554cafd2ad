//! Voxel-wise weight maps and the weighted cross-entropy of both heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Floor applied to probabilities before taking the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClWeights {
    pub cl_voxel: f64,
    pub background: f64,
    pub wml_voxel: f64,
}

impl Default for ClWeights {
    fn default() -> Self {
        Self {
            cl_voxel: 15.0,
            background: 1.0,
            wml_voxel: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TissueWeights {
    pub lesion_voxel: f64,
    pub other: f64,
}

impl Default for TissueWeights {
    fn default() -> Self {
        Self {
            lesion_voxel: 0.0,
            other: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub cl_weights: ClWeights,
    pub tissue_weights: TissueWeights,
    /// Multiplier of the tissue head's loss; 0 trains the lesion head alone.
    pub tissue_head_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cl_weights: ClWeights::default(),
            tissue_weights: TissueWeights::default(),
            tissue_head_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.cl_weights;
        let t = &self.tissue_weights;
        let all = [c.cl_voxel, c.background, c.wml_voxel, t.lesion_voxel, t.other, self.tissue_head_weight];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation("loss weights must be finite and non-negative".into()));
        }
        if c.cl_voxel <= c.background {
            return Err(Error::Validation(format!(
                "cl_voxel weight {} must exceed background weight {}",
                c.cl_voxel, c.background
            )));
        }
        Ok(())
    }
}

fn congruent(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{what}: crops have {a} and {b} voxels")));
    }
    Ok(())
}

/// Lesion-head weights: `cl_voxel` on cortical lesions (even where a WML is
/// also marked), `wml_voxel` on white-matter lesions, `background` elsewhere.
pub fn build_cl_weight_map<T: Real>(cl_labels: &[u8], wml_labels: &[u8], w: &ClWeights) -> Result<Vec<T>> {
    congruent(cl_labels.len(), wml_labels.len(), "cl weight map")?;
    let (cl, bg, wml) = (T::of(w.cl_voxel), T::of(w.background), T::of(w.wml_voxel));
    Ok(cl_labels
        .iter()
        .zip(wml_labels)
        .map(|(&c, &m)| match (c, m) {
            (1 | 2, _) => cl,
            (_, 1) => wml,
            _ => bg,
        })
        .collect())
}

/// Tissue-head weights: `lesion_voxel` on the union of both lesion masks,
/// `other` elsewhere.
pub fn build_tissue_weight_map<T: Real>(cl_labels: &[u8], wml_labels: &[u8], w: &TissueWeights) -> Result<Vec<T>> {
    congruent(cl_labels.len(), wml_labels.len(), "tissue weight map")?;
    let (les, other) = (T::of(w.lesion_voxel), T::of(w.other));
    Ok(cl_labels
        .iter()
        .zip(wml_labels)
        .map(|(&c, &m)| if c != 0 || m != 0 { les } else { other })
        .collect())
}

/// `Σ w·(−ln p[label]) / Σ w` over every voxel of the batch, with the
/// gradient with respect to the softmax logits, `w·(p − onehot)/Σ w`. Both
/// are zero when every weight is zero.
pub fn weighted_cross_entropy<T: Real>(probs: &Tensor<T>, labels: &[u8], weights: &[T]) -> Result<(f64, Tensor<T>)> {
    let [n, c, ..] = probs.shape();
    let vox = probs.voxels();
    congruent(labels.len(), n * vox, "cross-entropy labels")?;
    congruent(weights.len(), n * vox, "cross-entropy weights")?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Contract(format!("label {bad} outside {c} classes")));
    }
    let wsum: f64 = weights.iter().map(|w| w.as_f64()).sum();
    let mut grad = Tensor::zeros(probs.shape());
    if wsum <= 0.0 {
        return Ok((0.0, grad));
    }
    let scale = T::of(1.0 / wsum);
    let mut loss = 0.0;
    for b in 0..n {
        let p = probs.item(b);
        let g = grad.item_mut(b);
        for v in 0..vox {
            let w = weights[b * vox + v];
            if w == T::zero() {
                continue;
            }
            let l = labels[b * vox + v] as usize;
            loss += w.as_f64() * -p[l * vox + v].as_f64().max(LOG_FLOOR).ln();
            let ws = w * scale;
            for k in 0..c {
                g[k * vox + v] = ws * p[k * vox + v];
            }
            g[l * vox + v] -= ws;
        }
    }
    Ok((loss / wsum, grad))
}

/// Losses of both heads and their logit gradients.
#[derive(Clone, Debug)]
pub struct CombinedLoss<T> {
    /// `(L_cl + λ·L_tissue) / 2`.
    pub total: f64,
    pub cl: f64,
    /// The tissue term as it enters the total, `λ·L_tissue`.
    pub tissue: f64,
    pub grad_cl_logits: Tensor<T>,
    pub grad_tissue_logits: Tensor<T>,
}

/// Per-voxel targets and weights of both heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTargets<'a, T> {
    pub cl_labels: &'a [u8],
    pub tissue_labels: &'a [u8],
    pub cl_weights: &'a [T],
    pub tissue_weights: &'a [T],
}

pub fn combined_loss<T: Real>(
    cl_probs: &Tensor<T>,
    tissue_probs: &Tensor<T>,
    targets: &HeadTargets<'_, T>,
    tissue_head_weight: f64,
) -> Result<CombinedLoss<T>> {
    if cl_probs.shape()[2..] != tissue_probs.shape()[2..] || cl_probs.batch() != tissue_probs.batch() {
        return Err(Error::Contract("head outputs differ in shape".into()));
    }
    let (l_cl, mut g_cl) = weighted_cross_entropy(cl_probs, targets.cl_labels, targets.cl_weights)?;
    let (l_t, mut g_t) = weighted_cross_entropy(tissue_probs, targets.tissue_labels, targets.tissue_weights)?;
    let half = T::of(0.5);
    let t_scale = T::of(0.5 * tissue_head_weight);
    g_cl.data_mut().iter_mut().for_each(|g| *g *= half);
    g_t.data_mut().iter_mut().for_each(|g| *g *= t_scale);
    let tissue = tissue_head_weight * l_t;
    Ok(CombinedLoss {
        total: 0.5 * (l_cl + tissue),
        cl: l_cl,
        tissue,
        grad_cl_logits: g_cl,
        grad_tissue_logits: g_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::softmax_channels;

    #[test]
    fn uniform_probabilities_give_ln3() {
        let p = Tensor::<f64>::filled([1, 3, 2, 2, 2], 1.0 / 3.0);
        let (l, _) = weighted_cross_entropy(&p, &[0, 1, 2, 0, 1, 2, 0, 1], &[1.0; 8]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fixture_weights() {
        let mut cl = vec![0u8; 8];
        let mut wml = vec![0u8; 8];
        cl[2] = 1;
        wml[5] = 1;
        let w: Vec<f64> = build_cl_weight_map(&cl, &wml, &ClWeights::default()).unwrap();
        assert_eq!(w, vec![1.0, 1.0, 15.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        wml[2] = 1;
        let w: Vec<f64> = build_cl_weight_map(&cl, &wml, &ClWeights::default()).unwrap();
        assert_eq!(w[2], 15.0);
        let t: Vec<f64> = build_tissue_weight_map(&cl, &wml, &TissueWeights::default()).unwrap();
        assert_eq!(t, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn weight_scaling_invariance() {
        let logits = Tensor::<f64>::from_vec([1, 3, 1, 1, 2], vec![0.3, -1.0, 2.0, 0.1, -0.4, 0.7]).unwrap();
        let p = softmax_channels(&logits);
        let (l1, g1) = weighted_cross_entropy(&p, &[0, 2], &[1.0, 3.0]).unwrap();
        let (l2, g2) = weighted_cross_entropy(&p, &[0, 2], &[2.0, 6.0]).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn all_zero_weights() {
        let p = Tensor::<f64>::filled([1, 3, 1, 1, 2], 1.0 / 3.0);
        let (l, g) = weighted_cross_entropy(&p, &[0, 1], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combination_rule() {
        let p = Tensor::<f64>::filled([1, 3, 1, 1, 2], 1.0 / 3.0);
        let t = HeadTargets {
            cl_labels: &[0, 1],
            tissue_labels: &[1, 2],
            cl_weights: &[1.0, 1.0],
            tissue_weights: &[0.0, 0.0],
        };
        let c = combined_loss(&p, &p, &t, 1.0).unwrap();
        assert!((c.total - c.cl / 2.0).abs() < 1e-15);
        assert_eq!(c.tissue, 0.0);
    }

    #[test]
    fn rejects_inverted_weights() {
        let mut c = LossConfig::default();
        c.cl_weights.cl_voxel = 0.5;
        assert!(c.validate().is_err());
    }
}
