//! Whole-volume inference by tiling.
//!
//! The volume is mirror-padded by the network halo and covered by windows
//! whose outputs tile it exactly. Window origins are multiples of the output
//! side, itself a multiple of 4, so every tiling puts the pooling grid in the
//! same phase and a voxel's prediction does not depend on the window size.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::NetworkParams;
use super::{network::predict, output_shape, NetworkConfig, HALO};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{zscore_nonzero, Volume, VolumeKind};

/// A T2*-weighted contrast that may be zeroed at inference. MP2RAGE is never
/// dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropChannel {
    T2sEpi,
    T2sGre,
}

impl DropChannel {
    /// Network input channel index.
    pub fn channel(self) -> usize {
        match self {
            DropChannel::T2sEpi => 1,
            DropChannel::T2sGre => 2,
        }
    }
}

impl FromStr for DropChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2s_epi" => Ok(DropChannel::T2sEpi),
            "t2s_gre" => Ok(DropChannel::T2sGre),
            "mp2rage" => Err(Error::Validation(
                "mp2rage cannot be dropped; only t2s_epi or t2s_gre".into(),
            )),
            other => Err(Error::Validation(format!(
                "unknown drop channel {other:?}; expected t2s_epi or t2s_gre"
            ))),
        }
    }
}

impl fmt::Display for DropChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropChannel::T2sEpi => "t2s_epi",
            DropChannel::T2sGre => "t2s_gre",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceOptions {
    /// Input window side; the training patch side when unset.
    pub window: Option<usize>,
    pub drop_channel: Option<DropChannel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub cl_labels: Volume,
    pub tissue_labels: Volume,
    /// Probability of any cortical-lesion class, `1 − p(background)`.
    pub cl_prob: Volume,
}

/// Z-scored contrasts (nonzero voxels only) in channel order, with the
/// dropped channel zeroed after normalization.
pub fn prepare_inputs(contrasts: &[Volume; 3], drop: Option<DropChannel>) -> Result<[Vec<f32>; 3]> {
    let h0 = &contrasts[0].header;
    for v in &contrasts[1..] {
        if !v.header.same_geometry(h0) {
            return Err(Error::Geometry(format!(
                "contrast dims {:?} differ from {:?}",
                v.header.dims, h0.dims
            )));
        }
    }
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (o, v) in out.iter_mut().zip(contrasts) {
        let data = v
            .as_f32()
            .ok_or_else(|| Error::Validation("contrast volumes must be f32 intensities".into()))?;
        *o = zscore_nonzero(data);
    }
    if let Some(d) = drop {
        out[d.channel()].fill(0.0);
    }
    Ok(out)
}

/// Origins `0, out, 2·out, …` covering `n` voxels.
pub fn tile_origins(n: usize, out: usize) -> Vec<usize> {
    (0..n.div_ceil(out)).map(|t| t * out).collect()
}

/// Symmetric reflection of an out-of-range index into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

pub fn sliding_window_inference(
    params: &NetworkParams<f32>,
    cfg: &NetworkConfig,
    contrasts: &[Volume; 3],
    opts: &InferenceOptions,
) -> Result<Prediction> {
    let window = opts.window.unwrap_or(cfg.input_patch);
    let out = output_shape(window)?;
    let channels = prepare_inputs(contrasts, opts.drop_channel)?;
    let header = &contrasts[0].header;
    let [nx, ny, nz] = header.dims;
    let n = nx * ny * nz;

    let mut cl_labels = vec![0u8; n];
    let mut tissue_labels = vec![0u8; n];
    let mut cl_prob = vec![0f32; n];
    let halo = HALO as isize;

    for &oz in &tile_origins(nz, out) {
        for &oy in &tile_origins(ny, out) {
            for &ox in &tile_origins(nx, out) {
                let mut input = Tensor::<f32>::zeros([1, 3, window, window, window]);
                let xs: Vec<usize> = (0..window).map(|x| reflect(ox as isize + x as isize - halo, nx)).collect();
                for (c, src) in channels.iter().enumerate() {
                    for z in 0..window {
                        let sz = reflect(oz as isize + z as isize - halo, nz);
                        for y in 0..window {
                            let sy = reflect(oy as isize + y as isize - halo, ny);
                            let row = nx * (sy + ny * sz);
                            let at = input.offset(0, c, z, y, 0);
                            for (d, &sx) in input.data_mut()[at..at + window].iter_mut().zip(&xs) {
                                *d = src[row + sx];
                            }
                        }
                    }
                }
                let (pc, pt) = predict(params, cfg, &input)?;
                for z in 0..out.min(nz - oz) {
                    for y in 0..out.min(ny - oy) {
                        for x in 0..out.min(nx - ox) {
                            let v = ox + x + nx * (oy + y + ny * (oz + z));
                            let probs_c = [pc.at(0, 0, z, y, x), pc.at(0, 1, z, y, x), pc.at(0, 2, z, y, x)];
                            let probs_t = [pt.at(0, 0, z, y, x), pt.at(0, 1, z, y, x), pt.at(0, 2, z, y, x)];
                            cl_labels[v] = argmax(&probs_c);
                            tissue_labels[v] = argmax(&probs_t);
                            cl_prob[v] = 1.0 - probs_c[0];
                        }
                    }
                }
            }
        }
    }
    let (dims, sp, id) = (header.dims, header.spacing_mm, header.subject_id.as_str());
    Ok(Prediction {
        cl_labels: Volume::labels(dims, sp, VolumeKind::ClLabels, id, cl_labels)?,
        tissue_labels: Volume::labels(dims, sp, VolumeKind::TissueLabels, id, tissue_labels)?,
        cl_prob: Volume::intensity(dims, sp, id, cl_prob)?,
    })
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(p: &[f32; 3]) -> u8 {
    let mut best = 0;
    for k in 1..3 {
        if p[k] > p[best] {
            best = k;
        }
    }
    best as u8
}
