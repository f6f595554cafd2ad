//! Per-channel instance normalization without affine parameters. Optional;
//! the default network does not use it.

use crate::error::Result;
use crate::tensor::{expect_shape, Real, Tensor};

const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    /// Normalized output before any activation.
    pub normalized: Tensor<T>,
    /// `1/σ` per (batch, channel).
    pub inv_std: Vec<T>,
}

pub fn instance_norm<T: Real>(input: &Tensor<T>) -> NormCache<T> {
    let [n, c, ..] = input.shape();
    let v = input.voxels();
    let mut out = Tensor::zeros(input.shape());
    let mut inv_std = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            let x = input.channel(b, ch);
            let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / v as f64;
            let var = x.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / v as f64;
            let s = 1.0 / (var + EPS).sqrt();
            let (mean_t, s_t) = (T::of(mean), T::of(s));
            for (o, &xi) in out.channel_mut(b, ch).iter_mut().zip(x) {
                *o = (xi - mean_t) * s_t;
            }
            inv_std.push(s_t);
        }
    }
    NormCache {
        normalized: out,
        inv_std,
    }
}

/// `dx = (1/σ)·(dy − mean(dy) − y·mean(dy·y))` per channel.
pub fn instance_norm_backward<T: Real>(cache: &NormCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    expect_shape("instance norm backward", grad.shape(), cache.normalized.shape())?;
    let [n, c, ..] = grad.shape();
    let v = grad.voxels() as f64;
    let mut out = Tensor::zeros(grad.shape());
    for b in 0..n {
        for ch in 0..c {
            let y = cache.normalized.channel(b, ch);
            let g = grad.channel(b, ch);
            let mg = g.iter().map(|v| v.as_f64()).sum::<f64>() / v;
            let mgy = g.iter().zip(y).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / v;
            let s = cache.inv_std[b * c + ch];
            let (mg, mgy) = (T::of(mg), T::of(mgy));
            for ((o, &gi), &yi) in out.channel_mut(b, ch).iter_mut().zip(g).zip(y) {
                *o = s * (gi - mg - yi * mgy);
            }
        }
    }
    Ok(out)
}
