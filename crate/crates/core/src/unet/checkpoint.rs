//! Checkpoints: `<base>.json` header plus `<base>.bin` payload.
//!
//! The payload holds little-endian `f32` values: every parameter tensor in
//! [`NetworkParams::infos`] order, then the Adam first moments in the same
//! order, then the second moments. Sampling streams are derived from the run
//! seed and a draw counter, so the iteration count is the only random state
//! a resumed run needs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::{NetworkParams, ParamInfo};
use super::NetworkConfig;
use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "clseg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub iteration: u64,
    /// Seed of the run (initialization and sampling streams).
    pub seed: u64,
    pub params: NetworkParams<f32>,
    pub adam: AdamState<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Init {
    scheme: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    config: AdamConfig,
    step_count: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    network: NetworkConfig,
    iteration: u64,
    init: Init,
    adam: AdamHeader,
    tensors: Vec<ParamInfo>,
    payload_values: usize,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    let mut j = base.as_os_str().to_owned();
    j.push(".json");
    let mut b = base.as_os_str().to_owned();
    b.push(".bin");
    (PathBuf::from(j), PathBuf::from(b))
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(ck: &Checkpoint, base: impl AsRef<Path>) -> Result<()> {
    let (jp, bp) = paths(base.as_ref());
    let n = ck.params.len();
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        network: ck.network.clone(),
        iteration: ck.iteration,
        init: Init {
            scheme: "he_normal".into(),
            seed: ck.seed,
        },
        adam: AdamHeader {
            config: ck.adam.config.clone(),
            step_count: ck.adam.step_count,
        },
        tensors: ck.params.infos(),
        payload_values: 3 * n,
    };
    let mut bytes = Vec::with_capacity(12 * n);
    let values = ck
        .params
        .slices()
        .into_iter()
        .chain(ck.adam.m.iter().map(|v| &v[..]))
        .chain(ck.adam.v.iter().map(|v| &v[..]));
    for s in values {
        for x in s {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    if bytes.len() != 12 * n {
        return Err(bad(&bp, "Adam state is not congruent with the parameters"));
    }
    let mut json = serde_json::to_string_pretty(&header).expect("header serializes");
    json.push('\n');
    fs::write(&bp, bytes).map_err(|e| Error::io(&bp, e))?;
    fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
    Ok(())
}

pub fn load_checkpoint(base: impl AsRef<Path>) -> Result<Checkpoint> {
    let (jp, bp) = paths(base.as_ref());
    let text = fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    let h: Header = serde_json::from_str(&text).map_err(|e| bad(&jp, e.to_string()))?;
    if h.format != CHECKPOINT_FORMAT || h.version != CHECKPOINT_VERSION {
        return Err(bad(&jp, format!("unsupported format {} v{}", h.format, h.version)));
    }
    h.network.validate()?;
    let mut params = NetworkParams::<f32>::zeros(&h.network);
    if params.infos() != h.tensors {
        return Err(bad(&jp, "tensor list does not match the network configuration"));
    }
    let n = params.len();
    let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if h.payload_values != 3 * n || bytes.len() != 12 * n {
        return Err(bad(&bp, format!("payload has {} bytes, expected {}", bytes.len(), 12 * n)));
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    params.copy_from_flat(&vals[..n])?;
    let sizes: Vec<usize> = h.tensors.iter().map(ParamInfo::len).collect();
    let mut adam = AdamState::new(h.adam.config, &sizes);
    adam.step_count = h.adam.step_count;
    let mut at = n;
    for buf in adam.m.iter_mut().chain(adam.v.iter_mut()) {
        let len = buf.len();
        buf.copy_from_slice(&vals[at..at + len]);
        at += len;
    }
    Ok(Checkpoint {
        network: h.network,
        iteration: h.iteration,
        seed: h.init.seed,
        params,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::build_network;

    #[test]
    fn round_trip() {
        let cfg = NetworkConfig::with(2, 44);
        let params = build_network::<f32>(&cfg, 11);
        let sizes: Vec<usize> = params.infos().iter().map(ParamInfo::len).collect();
        let mut adam = AdamState::new(AdamConfig::default(), &sizes);
        adam.step_count = 3;
        adam.m[0][0] = 0.25;
        adam.v[27][0] = 1.5;
        let ck = Checkpoint {
            network: cfg,
            iteration: 3,
            seed: 11,
            params,
            adam,
        };
        let d = tempfile::tempdir().unwrap();
        let base = d.path().join("ck");
        save_checkpoint(&ck, &base).unwrap();
        assert_eq!(load_checkpoint(&base).unwrap(), ck);
    }
}
