use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Position of the maximum inside each 2³ block, as `dz·4 + dy·2 + dx`.
/// Ties resolve to the lowest linear index in the block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndex {
    input_shape: [usize; 5],
    argmax: Vec<u8>,
}

impl PoolIndex {
    pub fn input_shape(&self) -> [usize; 5] {
        self.input_shape
    }

    pub fn argmax(&self) -> &[u8] {
        &self.argmax
    }
}

/// 2³ max-pooling with stride 2.
pub fn maxpool3d<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndex)> {
    let [n, c, d, h, w] = input.shape();
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Contract(format!(
            "maxpool: spatial dims {:?} must all be even",
            [d, h, w]
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, od, oh, ow]);
    let mut argmax = vec![0u8; out.len()];
    let src = input.data();
    let mut o = 0;
    for b in 0..n {
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_k = 0u8;
                        for k in 0..8u8 {
                            let (dz, dy, dx) = ((k >> 2) as usize, ((k >> 1) & 1) as usize, (k & 1) as usize);
                            let v = src[input.offset(b, ch, 2 * z + dz, 2 * y + dy, 2 * x + dx)];
                            if k == 0 || v > best {
                                best = v;
                                best_k = k;
                            }
                        }
                        out.data_mut()[o] = best;
                        argmax[o] = best_k;
                        o += 1;
                    }
                }
            }
        }
    }
    Ok((
        out,
        PoolIndex {
            input_shape: input.shape(),
            argmax,
        },
    ))
}

pub fn maxpool3d_backward<T: Real>(index: &PoolIndex, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = index.input_shape;
    if grad_out.shape() != [n, c, d / 2, h / 2, w / 2] {
        return Err(Error::Contract(format!(
            "maxpool backward: grad shape {:?} does not match pooled shape",
            grad_out.shape()
        )));
    }
    let mut grad_in = Tensor::zeros(index.input_shape);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut o = 0;
    for b in 0..n {
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let k = index.argmax[o];
                        let (dz, dy, dx) = ((k >> 2) as usize, ((k >> 1) & 1) as usize, (k & 1) as usize);
                        let off = grad_in.offset(b, ch, 2 * z + dz, 2 * y + dy, 2 * x + dx);
                        grad_in.data_mut()[off] = grad_out.data()[o];
                        o += 1;
                    }
                }
            }
        }
    }
    Ok(grad_in)
}
