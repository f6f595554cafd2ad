//! Differentiable layers with hand-written backward passes.
//!
//! Every forward function is pure; the matching backward function takes
//! whatever the forward pass produced (input, output or argmax record) and
//! returns gradients. Nothing here allocates global state.

mod activation;
mod conv;
mod norm;
mod pool;
mod upconv;

pub use activation::{relu_backward, relu_inplace, softmax_backward, softmax_channels};
pub use conv::{conv3d_backward, conv3d_forward, conv3d_param_grads, ConvGrads, ConvParams};
pub use norm::{instance_norm, instance_norm_backward, NormCache};
pub use pool::{maxpool3d, maxpool3d_backward, PoolIndex};
pub use upconv::{upconv3d_backward, upconv3d_forward, UpConvGrads, UpConvParams};
