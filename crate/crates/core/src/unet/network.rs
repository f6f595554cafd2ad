//! Forward and backward passes through the U-Net⁻.

use super::params::NetworkParams;
use super::NetworkConfig;
use crate::error::Result;
use crate::gradcheck::Signature;
use crate::layers::{
    conv3d_backward, conv3d_forward, conv3d_param_grads, instance_norm, instance_norm_backward, maxpool3d,
    maxpool3d_backward, relu_backward, relu_inplace, softmax_channels, upconv3d_backward, upconv3d_forward,
    ConvParams, NormCache, PoolIndex, UpConvParams,
};
use crate::tensor::{concat_channels, crop_center, split_channels, uncrop_add, Real, Tensor};

/// Output of a conv → (norm) → ReLU block.
#[derive(Clone, Debug)]
struct Block<T> {
    out: Tensor<T>,
    norm: Option<NormCache<T>>,
}

fn block<T: Real>(x: &Tensor<T>, p: &ConvParams<T>, norm: bool) -> Result<Block<T>> {
    let y = conv3d_forward(x, p)?;
    let (mut out, norm) = if norm {
        let c = instance_norm(&y);
        (c.normalized.clone(), Some(c))
    } else {
        (y, None)
    };
    relu_inplace(&mut out);
    Ok(Block { out, norm })
}

/// Returns the gradient with respect to the block input when `want_input`.
fn block_backward<T: Real>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    b: &Block<T>,
    mut g: Tensor<T>,
    grads: &mut ConvParams<T>,
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    relu_backward(&b.out, &mut g)?;
    if let Some(c) = &b.norm {
        g = instance_norm_backward(c, &g)?;
    }
    if want_input {
        let cg = conv3d_backward(x, p, &g)?;
        grads.kernel = cg.kernel;
        grads.bias = cg.bias;
        Ok(Some(cg.input))
    } else {
        let (k, bias) = conv3d_param_grads(x, p, &g)?;
        grads.kernel = k;
        grads.bias = bias;
        Ok(None)
    }
}

/// Every intermediate the backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    input: Tensor<T>,
    e1a: Block<T>,
    e1b: Block<T>,
    p1: Tensor<T>,
    i1: PoolIndex,
    e2a: Block<T>,
    e2b: Block<T>,
    p2: Tensor<T>,
    i2: PoolIndex,
    ba: Block<T>,
    bb: Block<T>,
    cat1: Tensor<T>,
    d2a: Block<T>,
    d2b: Block<T>,
    cat2: Tensor<T>,
    d1a: Block<T>,
    d1b: Block<T>,
    pub cl_probs: Tensor<T>,
    pub tissue_probs: Tensor<T>,
}

impl<T: Real> ForwardCache<T> {
    fn blocks(&self) -> [&Block<T>; 10] {
        [
            &self.e1a, &self.e1b, &self.e2a, &self.e2b, &self.ba, &self.bb, &self.d2a, &self.d2b, &self.d1a,
            &self.d1b,
        ]
    }

    /// Hash of every ReLU mask and pooling argmax; two inputs with the same
    /// signature lie in the same linear region of the network.
    pub fn kink_signature(&self) -> u64 {
        let mut s = Signature::default();
        for b in self.blocks() {
            s.push_mask(b.out.data().iter().map(|v| *v > T::zero()));
        }
        for i in [&self.i1, &self.i2] {
            for &a in i.argmax() {
                s.push(a);
            }
        }
        s.finish()
    }
}

fn up_concat<T: Real>(x: &Tensor<T>, p: &UpConvParams<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
    let u = upconv3d_forward(x, p)?;
    let s = crop_center(skip, u.spatial())?;
    concat_channels(&u, &s)
}

pub fn forward<T: Real>(params: &NetworkParams<T>, cfg: &NetworkConfig, input: &Tensor<T>) -> Result<ForwardCache<T>> {
    let norm = cfg.instance_norm;
    let e1a = block(input, &params.enc1a, norm)?;
    let e1b = block(&e1a.out, &params.enc1b, norm)?;
    let (p1, i1) = maxpool3d(&e1b.out)?;
    let e2a = block(&p1, &params.enc2a, norm)?;
    let e2b = block(&e2a.out, &params.enc2b, norm)?;
    let (p2, i2) = maxpool3d(&e2b.out)?;
    let ba = block(&p2, &params.bot_a, norm)?;
    let bb = block(&ba.out, &params.bot_b, norm)?;
    let cat1 = up_concat(&bb.out, &params.up1, &e2b.out)?;
    let d2a = block(&cat1, &params.dec2a, norm)?;
    let d2b = block(&d2a.out, &params.dec2b, norm)?;
    let cat2 = up_concat(&d2b.out, &params.up2, &e1b.out)?;
    let d1a = block(&cat2, &params.dec1a, norm)?;
    let d1b = block(&d1a.out, &params.dec1b, norm)?;
    let cl_probs = softmax_channels(&conv3d_forward(&d1b.out, &params.head_cl)?);
    let tissue_probs = softmax_channels(&conv3d_forward(&d1b.out, &params.head_tissue)?);
    Ok(ForwardCache {
        input: input.clone(),
        e1a,
        e1b,
        p1,
        i1,
        e2a,
        e2b,
        p2,
        i2,
        ba,
        bb,
        cat1,
        d2a,
        d2b,
        cat2,
        d1a,
        d1b,
        cl_probs,
        tissue_probs,
    })
}

/// Forward pass that keeps only what later layers read; returns the
/// lesion and tissue probabilities.
pub fn predict<T: Real>(params: &NetworkParams<T>, cfg: &NetworkConfig, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let norm = cfg.instance_norm;
    let x = block(input, &params.enc1a, norm)?.out;
    let skip1 = block(&x, &params.enc1b, norm)?.out;
    let (x, _) = maxpool3d(&skip1)?;
    let x = block(&x, &params.enc2a, norm)?.out;
    let skip2 = block(&x, &params.enc2b, norm)?.out;
    let (x, _) = maxpool3d(&skip2)?;
    let x = block(&x, &params.bot_a, norm)?.out;
    let x = block(&x, &params.bot_b, norm)?.out;
    let x = up_concat(&x, &params.up1, &skip2)?;
    drop(skip2);
    let x = block(&x, &params.dec2a, norm)?.out;
    let x = block(&x, &params.dec2b, norm)?.out;
    let x = up_concat(&x, &params.up2, &skip1)?;
    drop(skip1);
    let x = block(&x, &params.dec1a, norm)?.out;
    let x = block(&x, &params.dec1b, norm)?.out;
    Ok((
        softmax_channels(&conv3d_forward(&x, &params.head_cl)?),
        softmax_channels(&conv3d_forward(&x, &params.head_tissue)?),
    ))
}

/// Parameter gradients given the loss gradients with respect to both heads'
/// logits.
pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    cfg: &NetworkConfig,
    cache: &ForwardCache<T>,
    grad_cl_logits: &Tensor<T>,
    grad_tissue_logits: &Tensor<T>,
) -> Result<NetworkParams<T>> {
    let mut g = NetworkParams::zeros(cfg);

    let hc = conv3d_backward(&cache.d1b.out, &params.head_cl, grad_cl_logits)?;
    let ht = conv3d_backward(&cache.d1b.out, &params.head_tissue, grad_tissue_logits)?;
    g.head_cl.kernel = hc.kernel;
    g.head_cl.bias = hc.bias;
    g.head_tissue.kernel = ht.kernel;
    g.head_tissue.bias = ht.bias;
    let mut gx = hc.input;
    gx.add_assign(&ht.input)?;

    let gx = block_backward(&cache.d1a.out, &params.dec1b, &cache.d1b, gx, &mut g.dec1b, true)?.unwrap();
    let gcat2 = block_backward(&cache.cat2, &params.dec1a, &cache.d1a, gx, &mut g.dec1a, true)?.unwrap();
    let (gu2, gskip1) = split_channels(&gcat2, params.up2.out_channels())?;
    let mut g_e1b = Tensor::zeros(cache.e1b.out.shape());
    uncrop_add(&gskip1, &mut g_e1b)?;
    let ug = upconv3d_backward(&cache.d2b.out, &params.up2, &gu2)?;
    g.up2.kernel = ug.kernel;
    g.up2.bias = ug.bias;

    let gx = block_backward(&cache.d2a.out, &params.dec2b, &cache.d2b, ug.input, &mut g.dec2b, true)?.unwrap();
    let gcat1 = block_backward(&cache.cat1, &params.dec2a, &cache.d2a, gx, &mut g.dec2a, true)?.unwrap();
    let (gu1, gskip2) = split_channels(&gcat1, params.up1.out_channels())?;
    let mut g_e2b = Tensor::zeros(cache.e2b.out.shape());
    uncrop_add(&gskip2, &mut g_e2b)?;
    let ug = upconv3d_backward(&cache.bb.out, &params.up1, &gu1)?;
    g.up1.kernel = ug.kernel;
    g.up1.bias = ug.bias;

    let gx = block_backward(&cache.ba.out, &params.bot_b, &cache.bb, ug.input, &mut g.bot_b, true)?.unwrap();
    let gp2 = block_backward(&cache.p2, &params.bot_a, &cache.ba, gx, &mut g.bot_a, true)?.unwrap();
    g_e2b.add_assign(&maxpool3d_backward(&cache.i2, &gp2)?)?;

    let gx = block_backward(&cache.e2a.out, &params.enc2b, &cache.e2b, g_e2b, &mut g.enc2b, true)?.unwrap();
    let gp1 = block_backward(&cache.p1, &params.enc2a, &cache.e2a, gx, &mut g.enc2a, true)?.unwrap();
    g_e1b.add_assign(&maxpool3d_backward(&cache.i1, &gp1)?)?;

    let gx = block_backward(&cache.e1a.out, &params.enc1b, &cache.e1b, g_e1b, &mut g.enc1b, true)?.unwrap();
    block_backward(&cache.input, &params.enc1a, &cache.e1a, gx, &mut g.enc1a, false)?;
    Ok(g)
}
