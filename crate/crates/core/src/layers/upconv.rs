//! 2³ transposed convolution with stride 2 (the adjoint of a stride-2 valid
//! convolution with a 2³ kernel). Every output voxel receives exactly one
//! kernel tap per input channel.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct UpConvParams<T> {
    /// Shape `(in_ch, out_ch, 2, 2, 2)`.
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Real> UpConvParams<T> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            kernel: Tensor::zeros([in_ch, out_ch, 2, 2, 2]),
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    fn check(&self, input: &Tensor<T>) -> Result<()> {
        if input.channels() != self.in_channels() || self.bias.len() != self.out_channels() {
            return Err(Error::Contract(format!(
                "upconv: input channels {} vs kernel {:?}",
                input.channels(),
                self.kernel.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UpConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn upconv3d_forward<T: Real>(input: &Tensor<T>, p: &UpConvParams<T>) -> Result<Tensor<T>> {
    p.check(input)?;
    let [n, cin, d, h, w] = input.shape();
    let cout = p.out_channels();
    let v = d * h * w;
    let rows = cout * 8;
    let mut out = Tensor::zeros([n, cout, 2 * d, 2 * h, 2 * w]);
    let mut taps = vec![T::zero(); rows * v];
    for b in 0..n {
        // taps ((o, k) × v) = Kᵀ ((o, k) × cin) · in (cin × v)
        T::gemm_raw(
            rows,
            cin,
            v,
            T::one(),
            p.kernel.data(),
            (1, rows),
            input.item(b),
            (v, 1),
            T::zero(),
            &mut taps,
            (v, 1),
        );
        for o in 0..cout {
            for k in 0..8 {
                let (dz, dy, dx) = (k >> 2, (k >> 1) & 1, k & 1);
                let row = &taps[(o * 8 + k) * v..(o * 8 + k + 1) * v];
                let mut i = 0;
                for z in 0..d {
                    for y in 0..h {
                        let base = out.offset(b, o, 2 * z + dz, 2 * y + dy, dx);
                        let dst = out.data_mut();
                        for x in 0..w {
                            dst[base + 2 * x] = row[i] + p.bias[o];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn upconv3d_backward<T: Real>(
    input: &Tensor<T>,
    p: &UpConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<UpConvGrads<T>> {
    p.check(input)?;
    let [n, cin, d, h, w] = input.shape();
    let cout = p.out_channels();
    if grad_out.shape() != [n, cout, 2 * d, 2 * h, 2 * w] {
        return Err(Error::Contract(format!(
            "upconv backward: grad shape {:?} does not match output shape",
            grad_out.shape()
        )));
    }
    let v = d * h * w;
    let rows = cout * 8;
    let mut gathered = vec![T::zero(); rows * v];
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_kernel = Tensor::zeros(p.kernel.shape());
    let mut grad_bias = vec![T::zero(); cout];
    for b in 0..n {
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            *gb += grad_out.channel(b, o).iter().copied().sum::<T>();
            for k in 0..8 {
                let (dz, dy, dx) = (k >> 2, (k >> 1) & 1, k & 1);
                let row = &mut gathered[(o * 8 + k) * v..(o * 8 + k + 1) * v];
                let mut i = 0;
                for z in 0..d {
                    for y in 0..h {
                        let base = grad_out.offset(b, o, 2 * z + dz, 2 * y + dy, dx);
                        for x in 0..w {
                            row[i] = grad_out.data()[base + 2 * x];
                            i += 1;
                        }
                    }
                }
            }
        }
        // gin (cin × v) = K (cin × rows) · G (rows × v)
        T::gemm_raw(
            cin,
            rows,
            v,
            T::one(),
            p.kernel.data(),
            (rows, 1),
            &gathered,
            (v, 1),
            T::zero(),
            grad_input.item_mut(b),
            (v, 1),
        );
        // gK (cin × rows) += in (cin × v) · Gᵀ (v × rows)
        T::gemm_raw(
            cin,
            v,
            rows,
            T::one(),
            input.item(b),
            (v, 1),
            &gathered,
            (1, v),
            T::one(),
            grad_kernel.data_mut(),
            (rows, 1),
        );
    }
    Ok(UpConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}
