//! One optimization step and the whole-network gradient check.

use rand::seq::index::sample;

use super::network::{backward, forward};
use super::params::NetworkParams;
use super::NetworkConfig;
use crate::adam::{adam_step, AdamState};
use crate::error::{Error, Result};
use crate::gradcheck::{check_group, GradCheckReport};
use crate::loss::{build_cl_weight_map, build_tissue_weight_map, combined_loss, CombinedLoss, HeadTargets, LossConfig};
use crate::rng::stream_rng;
use crate::tensor::{Real, Tensor};

/// Input patches with their label crops and weight maps, batch-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub cl_labels: Vec<u8>,
    pub tissue_labels: Vec<u8>,
    pub cl_weights: Vec<T>,
    pub tissue_weights: Vec<T>,
    /// Patch identifiers, reported when a step goes non-finite.
    pub ids: Vec<String>,
}

impl<T: Real> Batch<T> {
    /// Builds both weight maps from the label crops.
    pub fn new(
        input: Tensor<T>,
        cl_labels: Vec<u8>,
        tissue_labels: Vec<u8>,
        wml_labels: &[u8],
        loss: &LossConfig,
        ids: Vec<String>,
    ) -> Result<Self> {
        let cl_weights = build_cl_weight_map(&cl_labels, wml_labels, &loss.cl_weights)?;
        let tissue_weights = build_tissue_weight_map(&cl_labels, wml_labels, &loss.tissue_weights)?;
        Ok(Self {
            input,
            cl_labels,
            tissue_labels,
            cl_weights,
            tissue_weights,
            ids,
        })
    }

    fn targets(&self) -> HeadTargets<'_, T> {
        HeadTargets {
            cl_labels: &self.cl_labels,
            tissue_labels: &self.tissue_labels,
            cl_weights: &self.cl_weights,
            tissue_weights: &self.tissue_weights,
        }
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            input: self.input.cast(),
            cl_labels: self.cl_labels.clone(),
            tissue_labels: self.tissue_labels.clone(),
            cl_weights: self.cl_weights.iter().map(|w| U::of(w.as_f64())).collect(),
            tissue_weights: self.tissue_weights.iter().map(|w| U::of(w.as_f64())).collect(),
            ids: self.ids.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub cl: f64,
    /// The tissue term as it enters the total (zero when the head is off).
    pub tissue: f64,
}

fn loss_of<T: Real>(
    params: &NetworkParams<T>,
    cfg: &NetworkConfig,
    batch: &Batch<T>,
    loss: &LossConfig,
) -> Result<(CombinedLoss<T>, super::network::ForwardCache<T>)> {
    let cache = forward(params, cfg, &batch.input)?;
    let l = combined_loss(&cache.cl_probs, &cache.tissue_probs, &batch.targets(), loss.tissue_head_weight)?;
    Ok((l, cache))
}

/// Forward, combined loss, backward and one Adam update.
pub fn train_step<T: Real>(
    params: &mut NetworkParams<T>,
    cfg: &NetworkConfig,
    state: &mut AdamState<T>,
    batch: &Batch<T>,
    loss: &LossConfig,
) -> Result<StepLosses> {
    let (l, cache) = loss_of(params, cfg, batch, loss)?;
    if !(l.total.is_finite() && l.cl.is_finite() && l.tissue.is_finite()) {
        return Err(Error::NonFinite(format!(
            "cl {} tissue {} at step {} on patches [{}]",
            l.cl,
            l.tissue,
            state.step_count + 1,
            batch.ids.join(", ")
        )));
    }
    let grads = backward(params, cfg, &cache, &l.grad_cl_logits, &l.grad_tissue_logits)?;
    drop(cache);
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!(
            "gradient at step {} on patches [{}]",
            state.step_count + 1,
            batch.ids.join(", ")
        )));
    }
    let gs = grads.slices();
    adam_step(&mut params.slices_mut(), &gs, state)?;
    Ok(StepLosses {
        total: l.total,
        cl: l.cl,
        tissue: l.tissue,
    })
}

/// Compares the analytic gradient of the combined loss with central finite
/// differences on up to `coords_per_group` random coordinates of every
/// parameter tensor. Coordinates whose perturbation crosses a ReLU or
/// pooling kink are skipped.
pub fn gradient_check_network(
    params: &NetworkParams<f64>,
    cfg: &NetworkConfig,
    batch: &Batch<f64>,
    loss: &LossConfig,
    coords_per_group: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (l, cache) = loss_of(params, cfg, batch, loss)?;
    let base_sig = cache.kink_signature();
    let grads = backward(params, cfg, &cache, &l.grad_cl_logits, &l.grad_tissue_logits)?;
    drop(cache);

    let mut report = GradCheckReport::new(tolerance);
    let infos = params.infos();
    let grad_slices = grads.slices();
    let mut work = params.clone();
    let mut err = None;
    for (g, info) in infos.iter().enumerate() {
        let values = params.slices()[g].to_vec();
        let n = values.len();
        let mut rng = stream_rng(seed, &[g as u64]);
        let mut coords = sample(&mut rng, n, coords_per_group.min(n)).into_vec();
        coords.sort_unstable();
        let group = check_group(&info.name, &values, grad_slices[g], &coords, base_sig, |i, x| {
            work.slices_mut()[g][i] = x;
            let out = loss_of(&work, cfg, batch, loss);
            work.slices_mut()[g][i] = values[i];
            match out {
                Ok((l, c)) => (l.total, c.kink_signature()),
                Err(e) => {
                    err = Some(e);
                    (f64::NAN, 0)
                }
            }
        });
        if let Some(e) = err.take() {
            return Err(e);
        }
        report.groups.push(group);
    }
    Ok(report)
}
