//! Multi-task 3D U-Net⁻ for cortical lesion detection in multi-contrast 7T MRI.
//!
//! The crate is organised bottom-up:
//!
//! * [`volume`] reads and writes the raw-binary-plus-JSON volume format.
//! * [`tensor`] and [`layers`] provide the dense 5-D tensor and the
//!   differentiable layer set (valid 3D convolution, max-pooling, transposed
//!   convolution, ReLU, channel softmax), together with [`adam`] and the
//!   finite-difference checker in [`gradcheck`].
//! * [`unet`] assembles the three-level network with its lesion and tissue
//!   heads, and [`loss`] builds the voxel-wise weight maps and the weighted
//!   cross-entropy.
//! * [`sampling`] draws lesion-balanced, augmented training patches.
//! * [`phantom`] generates synthetic multi-contrast brains with planted
//!   cortical lesions of all four types.
//! * [`eval`] implements the lesion-wise evaluation protocol.

pub mod adam;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod phantom;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
pub use volume::{Dtype, Volume, VolumeData, VolumeHeader, VolumeKind};
