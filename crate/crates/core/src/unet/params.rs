//! Learnable parameters of the network, their fixed serialization order and
//! He initialization.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::NetworkConfig;
use crate::error::Result;
use crate::layers::{ConvParams, UpConvParams};
use crate::rng::stream_rng;
use crate::tensor::Real;

/// Stream tag separating initialization draws from every other use of the
/// run seed.
const INIT_STREAM: u64 = 0x1417;

/// Applies `$m!` to the layer list in parameter order.
macro_rules! layers {
    ($m:ident) => {
        $m!(
            conv enc1a, conv enc1b, conv enc2a, conv enc2b, conv bot_a, conv bot_b,
            up up1, conv dec2a, conv dec2b, up up2, conv dec1a, conv dec1b,
            conv head_cl, conv head_tissue
        )
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub enc1a: ConvParams<T>,
    pub enc1b: ConvParams<T>,
    pub enc2a: ConvParams<T>,
    pub enc2b: ConvParams<T>,
    pub bot_a: ConvParams<T>,
    pub bot_b: ConvParams<T>,
    pub up1: UpConvParams<T>,
    pub dec2a: ConvParams<T>,
    pub dec2b: ConvParams<T>,
    pub up2: UpConvParams<T>,
    pub dec1a: ConvParams<T>,
    pub dec1b: ConvParams<T>,
    pub head_cl: ConvParams<T>,
    pub head_tissue: ConvParams<T>,
}

/// Name and shape of one parameter tensor in serialization order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Real> NetworkParams<T> {
    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        let b = cfg.base_channels;
        Self {
            enc1a: ConvParams::zeros(b, cfg.in_channels, 3),
            enc1b: ConvParams::zeros(2 * b, b, 3),
            enc2a: ConvParams::zeros(2 * b, 2 * b, 3),
            enc2b: ConvParams::zeros(4 * b, 2 * b, 3),
            bot_a: ConvParams::zeros(4 * b, 4 * b, 3),
            bot_b: ConvParams::zeros(8 * b, 4 * b, 3),
            up1: UpConvParams::zeros(8 * b, 8 * b),
            dec2a: ConvParams::zeros(4 * b, 12 * b, 3),
            dec2b: ConvParams::zeros(4 * b, 4 * b, 3),
            up2: UpConvParams::zeros(4 * b, 4 * b),
            dec1a: ConvParams::zeros(2 * b, 6 * b, 3),
            dec1b: ConvParams::zeros(2 * b, 2 * b, 3),
            head_cl: ConvParams::zeros(cfg.cl_classes, 2 * b, 1),
            head_tissue: ConvParams::zeros(cfg.tissue_classes, 2 * b, 1),
        }
    }

    /// Parameter tensors (kernel, then bias, per layer) in fixed order.
    pub fn slices(&self) -> Vec<&[T]> {
        macro_rules! collect {
            ($($kind:ident $f:ident),*) => {
                vec![$(self.$f.kernel.data(), &self.$f.bias[..]),*]
            };
        }
        layers!(collect)
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        macro_rules! collect {
            ($($kind:ident $f:ident),*) => {
                vec![$(self.$f.kernel.data_mut(), &mut self.$f.bias[..]),*]
            };
        }
        layers!(collect)
    }

    pub fn infos(&self) -> Vec<ParamInfo> {
        macro_rules! collect {
            ($($kind:ident $f:ident),*) => {
                vec![$(
                    ParamInfo {
                        name: concat!(stringify!($f), ".kernel").to_string(),
                        shape: self.$f.kernel.shape().to_vec(),
                    },
                    ParamInfo {
                        name: concat!(stringify!($f), ".bias").to_string(),
                        shape: vec![self.$f.bias.len()],
                    }
                ),*]
            };
        }
        layers!(collect)
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        macro_rules! cast {
            ($($kind:ident $f:ident),*) => {
                NetworkParams {
                    $($f: cast!(@ $kind self.$f)),*
                }
            };
            (@conv $p:expr) => {
                ConvParams { kernel: $p.kernel.cast(), bias: $p.bias.iter().map(|v| U::of(v.as_f64())).collect() }
            };
            (@up $p:expr) => {
                UpConvParams { kernel: $p.kernel.cast(), bias: $p.bias.iter().map(|v| U::of(v.as_f64())).collect() }
            };
        }
        layers!(cast)
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Flattened copy in serialization order.
    pub fn to_flat(&self) -> Vec<T> {
        self.slices().concat()
    }

    /// Overwrites every parameter from a flat buffer in serialization order.
    pub fn copy_from_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(crate::Error::Contract(format!(
                "flat buffer has {} values, network needs {}",
                flat.len(),
                self.len()
            )));
        }
        let mut at = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        }
        Ok(())
    }
}

/// He-normal kernels (variance 2/fan_in) and zero biases, deterministic in
/// `seed`. A convolution's fan-in is `in_ch·k³`; each output voxel of the
/// transposed convolution sees one tap per input channel, so its fan-in is
/// `in_ch`.
pub fn build_network<T: Real>(cfg: &NetworkConfig, seed: u64) -> NetworkParams<T> {
    let mut p = NetworkParams::<T>::zeros(cfg);
    let infos = p.infos();
    for (layer, (slot, info)) in p.slices_mut().into_iter().zip(&infos).enumerate() {
        if info.name.ends_with(".bias") {
            continue;
        }
        let fan_in = if info.name.starts_with("up") {
            info.shape[0]
        } else {
            info.shape[1..].iter().product()
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let mut rng = stream_rng(seed, &[INIT_STREAM, layer as u64]);
        for v in slot.iter_mut() {
            *v = T::of(normal.sample(&mut rng));
        }
    }
    p
}

/// Closed-form parameter count for a configuration.
pub fn parameter_count(cfg: &NetworkConfig) -> usize {
    let b = cfg.base_channels;
    let conv = |o: usize, i: usize, k: usize| o * i * k * k * k + o;
    conv(b, cfg.in_channels, 3)
        + conv(2 * b, b, 3)
        + conv(2 * b, 2 * b, 3)
        + conv(4 * b, 2 * b, 3)
        + conv(4 * b, 4 * b, 3)
        + conv(8 * b, 4 * b, 3)
        + (8 * b * 8 * b * 8 + 8 * b)
        + conv(4 * b, 12 * b, 3)
        + conv(4 * b, 4 * b, 3)
        + (4 * b * 4 * b * 8 + 4 * b)
        + conv(2 * b, 6 * b, 3)
        + conv(2 * b, 2 * b, 3)
        + conv(cfg.cl_classes, 2 * b, 1)
        + conv(cfg.tissue_classes, 2 * b, 1)
}
