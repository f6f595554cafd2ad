use crate::error::Result;
use crate::tensor::{expect_shape, Real, Tensor};

pub fn relu_inplace<T: Real>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Masks `grad` with the ReLU output. The subgradient at zero is zero.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad: &mut Tensor<T>) -> Result<()> {
    expect_shape("relu backward", grad.shape(), output.shape())?;
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if !(o > T::zero()) {
            *g = T::zero();
        }
    }
    Ok(())
}

/// Per-voxel softmax over the channel axis, with max subtraction.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, ..] = logits.shape();
    let v = logits.voxels();
    let mut out = Tensor::zeros(logits.shape());
    let mut buf = vec![T::zero(); c];
    for b in 0..n {
        let src = logits.item(b);
        let base = b * c * v;
        for i in 0..v {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(src[ch * v + i]);
            }
            let mut sum = T::zero();
            for (ch, e) in buf.iter_mut().enumerate() {
                *e = (src[ch * v + i] - m).exp();
                sum += *e;
            }
            let dst = out.data_mut();
            for (ch, e) in buf.iter().enumerate() {
                dst[base + ch * v + i] = *e / sum;
            }
        }
    }
    out
}

/// Vector-Jacobian product of the channel softmax: `p ⊙ (g − Σ_c p_c g_c)`.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Result<Tensor<T>> {
    expect_shape("softmax backward", grad_probs.shape(), probs.shape())?;
    let [n, c, ..] = probs.shape();
    let v = probs.voxels();
    let mut out = Tensor::zeros(probs.shape());
    for b in 0..n {
        let p = probs.item(b);
        let g = grad_probs.item(b);
        let base = b * c * v;
        for i in 0..v {
            let dot: T = (0..c).map(|ch| p[ch * v + i] * g[ch * v + i]).sum();
            let dst = out.data_mut();
            for ch in 0..c {
                dst[base + ch * v + i] = p[ch * v + i] * (g[ch * v + i] - dot);
            }
        }
    }
    Ok(out)
}
