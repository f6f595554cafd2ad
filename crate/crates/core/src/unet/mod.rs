//! The three-level U-Net⁻ with a lesion head and a tissue head.
//!
//! Every convolution is valid, so a 68³ input patch yields a 28³ output:
//!
//! ```text
//! 68 → 66 → 64 ─pool→ 32 → 30 → 28 ─pool→ 14 → 12 → 10 ─up→ 20
//!           │                    └──── crop 28→20 ──────────┘
//!           │         20 → 18 → 16 ─up→ 32
//!           └──── crop 64→32 ───────────┘
//!                     32 → 30 → 28 → heads (1³ conv, softmax)
//! ```
//!
//! Channel widths double per level from `base_channels` (16/32, 32/64,
//! 64/128 for the default). Both heads read the final decoder features.

mod checkpoint;
mod infer;
mod network;
mod params;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use infer::{prepare_inputs, sliding_window_inference, tile_origins, DropChannel, InferenceOptions, Prediction};
pub use network::{backward, forward, predict, ForwardCache};
pub use params::{build_network, parameter_count, NetworkParams, ParamInfo};
pub use train::{gradient_check_network, train_step, Batch, StepLosses};

use crate::error::{Error, Result};

/// Voxels lost per side between input and output: the margin the sliding
/// window must pad by.
pub const HALO: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub input_patch: usize,
    pub output_patch: usize,
    pub cl_classes: usize,
    pub tissue_classes: usize,
    /// Per-channel instance normalization after every 3³ convolution.
    pub instance_norm: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 16,
            levels: 3,
            input_patch: 68,
            output_patch: 28,
            cl_classes: 3,
            tissue_classes: 3,
            instance_norm: false,
        }
    }
}

impl NetworkConfig {
    /// Default configuration with a different width and patch side.
    pub fn with(base_channels: usize, input_patch: usize) -> Self {
        Self {
            base_channels,
            input_patch,
            output_patch: input_patch.saturating_sub(2 * HALO),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels != 3 {
            return Err(Error::Validation(format!("levels must be 3, got {}", self.levels)));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Validation("channel counts must be positive".into()));
        }
        if self.cl_classes != 3 || self.tissue_classes != 3 {
            return Err(Error::Validation("both heads predict exactly 3 classes".into()));
        }
        let out = output_shape(self.input_patch)?;
        if out != self.output_patch {
            return Err(Error::Validation(format!(
                "output_patch {} inconsistent with input_patch {} (expected {out})",
                self.output_patch, self.input_patch
            )));
        }
        Ok(())
    }
}

/// Output side for a cubic input of side `input_side`.
///
/// Valid sides are multiples of 4 that are at least 44: both poolings need
/// even extents and the bottom level needs room for two 3³ convolutions.
pub fn output_shape(input_side: usize) -> Result<usize> {
    if input_side % 4 != 0 || input_side < 44 {
        return Err(Error::Contract(format!(
            "input side {input_side} invalid: must be divisible by 4 and at least 44"
        )));
    }
    let l1 = input_side - 4;
    let l2 = l1 / 2 - 4;
    let bottom = l2 / 2 - 4;
    let dec2 = 2 * bottom - 4;
    let dec1 = 2 * dec2 - 4;
    Ok(dec1)
}
