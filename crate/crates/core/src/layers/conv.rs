//! Valid (unpadded) stride-1 3D convolution, lowered to matrix products.
//!
//! The input is unfolded slab by slab along depth so the column buffer stays
//! bounded regardless of the volume size. The input gradient is itself a
//! convolution of the zero-padded output gradient with the flipped,
//! channel-transposed kernel, so the same lowering serves both directions.

use crate::error::{Error, Result};
use crate::tensor::{expect_shape, Real, Tensor};

/// Upper bound on column-buffer elements per slab.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// Shape `(out_ch, in_ch, k, k, k)`.
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        Self {
            kernel: Tensor::zeros([out_ch, in_ch, k, k, k]),
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    fn check(&self, input: &Tensor<T>) -> Result<[usize; 3]> {
        let k = self.kernel_size();
        if self.bias.len() != self.out_channels() {
            return Err(Error::Contract("conv: bias length differs from out channels".into()));
        }
        if input.channels() != self.in_channels() {
            return Err(Error::Contract(format!(
                "conv: input has {} channels, kernel expects {}",
                input.channels(),
                self.in_channels()
            )));
        }
        let s = input.spatial();
        if s.iter().any(|&v| v < k) {
            return Err(Error::Contract(format!(
                "conv: spatial dims {s:?} smaller than kernel {k}"
            )));
        }
        Ok([s[0] - k + 1, s[1] - k + 1, s[2] - k + 1])
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv3d_forward<T: Real>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let od = p.check(input)?;
    let (cout, cin, k) = (p.out_channels(), p.in_channels(), p.kernel_size());
    let mut out = Tensor::zeros([input.batch(), cout, od[0], od[1], od[2]]);
    let mut cols = Vec::new();
    for n in 0..input.batch() {
        conv_item(
            input.item(n),
            cin,
            input.spatial(),
            k,
            0,
            p.kernel.data(),
            cout,
            Some(&p.bias),
            out.item_mut(n),
            od,
            &mut cols,
        );
    }
    Ok(out)
}

pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (input_grad, kernel, bias) = backward(input, p, grad_out, true)?;
    Ok(ConvGrads {
        input: input_grad.expect("input gradient requested"),
        kernel,
        bias,
    })
}

/// Kernel and bias gradients only, for a layer whose input needs none.
pub fn conv3d_param_grads<T: Real>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (_, kernel, bias) = backward(input, p, grad_out, false)?;
    Ok((kernel, bias))
}

type Backward<T> = (Option<Tensor<T>>, Tensor<T>, Vec<T>);

fn backward<T: Real>(input: &Tensor<T>, p: &ConvParams<T>, grad_out: &Tensor<T>, want_input: bool) -> Result<Backward<T>> {
    let od = p.check(input)?;
    let (cout, cin, k) = (p.out_channels(), p.in_channels(), p.kernel_size());
    expect_shape(
        "conv backward grad_out",
        grad_out.shape(),
        [input.batch(), cout, od[0], od[1], od[2]],
    )?;
    let dims = input.spatial();
    let kk = cin * k * k * k;
    let out_vox = od[0] * od[1] * od[2];

    let mut grad_kernel = Tensor::zeros(p.kernel.shape());
    let mut grad_bias = vec![T::zero(); cout];
    let mut grad_input = if want_input { Tensor::zeros(input.shape()) } else { Tensor::zeros([0; 5]) };
    let flipped = if k > 1 && want_input { Some(flip_transpose(p)) } else { None };
    let mut cols = Vec::new();

    for n in 0..input.batch() {
        let g = grad_out.item(n);
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            *gb += g[o * out_vox..(o + 1) * out_vox].iter().copied().sum::<T>();
        }

        // Kernel gradient: gK (cout × kk) += gout (cout × N) · colsᵀ (N × kk).
        if k == 1 && dims == od {
            T::gemm_raw(
                cout,
                out_vox,
                kk,
                T::one(),
                g,
                (out_vox, 1),
                input.item(n),
                (1, out_vox),
                T::one(),
                grad_kernel.data_mut(),
                (kk, 1),
            );
        } else {
            let plane = od[1] * od[2];
            let zc = slab_depth(kk, plane, od[0]);
            let mut z0 = 0;
            while z0 < od[0] {
                let zn = zc.min(od[0] - z0);
                let ncols = zn * plane;
                cols.resize(kk * ncols, T::zero());
                im2col(input.item(n), cin, dims, k, 0, od, z0, zn, &mut cols);
                T::gemm_raw(
                    cout,
                    ncols,
                    kk,
                    T::one(),
                    &g[z0 * plane..],
                    (out_vox, 1),
                    &cols,
                    (1, ncols),
                    T::one(),
                    grad_kernel.data_mut(),
                    (kk, 1),
                );
                z0 += zn;
            }
        }

        if !want_input {
            continue;
        }
        match &flipped {
            None => {
                // gin (cin × V) = Wᵀ (cin × cout) · gout (cout × V)
                T::gemm_raw(
                    cin,
                    cout,
                    out_vox,
                    T::one(),
                    p.kernel.data(),
                    (1, cin),
                    g,
                    (out_vox, 1),
                    T::zero(),
                    grad_input.item_mut(n),
                    (out_vox, 1),
                );
            }
            Some(wf) => conv_item(
                g,
                cout,
                od,
                k,
                k - 1,
                wf,
                cin,
                None,
                grad_input.item_mut(n),
                dims,
                &mut cols,
            ),
        }
    }
    Ok((want_input.then_some(grad_input), grad_kernel, grad_bias))
}

/// `wf[i][o][a][b][c] = w[o][i][k-1-a][k-1-b][k-1-c]`, as a `cin × cout·k³`
/// row-major matrix.
fn flip_transpose<T: Real>(p: &ConvParams<T>) -> Vec<T> {
    let (cout, cin, k) = (p.out_channels(), p.in_channels(), p.kernel_size());
    let k3 = k * k * k;
    let w = p.kernel.data();
    let mut out = vec![T::zero(); cin * cout * k3];
    for o in 0..cout {
        for i in 0..cin {
            let src = &w[(o * cin + i) * k3..(o * cin + i + 1) * k3];
            let dst = &mut out[(i * cout + o) * k3..(i * cout + o + 1) * k3];
            for (t, d) in dst.iter_mut().enumerate() {
                *d = src[k3 - 1 - t];
            }
        }
    }
    out
}

fn slab_depth(kk: usize, plane: usize, depth: usize) -> usize {
    (COLS_BUDGET / (kk * plane).max(1)).clamp(1, depth.max(1))
}

/// One batch item: `out (cout × od³) = weights (cout × cin·k³) · unfold(src)`,
/// with `src` implicitly zero-padded by `pad` on every face.
#[allow(clippy::too_many_arguments)]
fn conv_item<T: Real>(
    src: &[T],
    cin: usize,
    dims: [usize; 3],
    k: usize,
    pad: usize,
    weights: &[T],
    cout: usize,
    bias: Option<&[T]>,
    out: &mut [T],
    od: [usize; 3],
    cols: &mut Vec<T>,
) {
    let kk = cin * k * k * k;
    let out_vox = od[0] * od[1] * od[2];
    let beta = match bias {
        Some(b) => {
            for (o, &bv) in b.iter().enumerate() {
                out[o * out_vox..(o + 1) * out_vox].fill(bv);
            }
            T::one()
        }
        None => T::zero(),
    };
    if k == 1 && pad == 0 {
        T::gemm_raw(
            cout,
            kk,
            out_vox,
            T::one(),
            weights,
            (kk, 1),
            src,
            (out_vox, 1),
            beta,
            out,
            (out_vox, 1),
        );
        return;
    }
    let plane = od[1] * od[2];
    let zc = slab_depth(kk, plane, od[0]);
    let mut z0 = 0;
    while z0 < od[0] {
        let zn = zc.min(od[0] - z0);
        let ncols = zn * plane;
        cols.resize(kk * ncols, T::zero());
        im2col(src, cin, dims, k, pad, od, z0, zn, cols);
        T::gemm_raw(
            cout,
            kk,
            ncols,
            T::one(),
            weights,
            (kk, 1),
            cols,
            (ncols, 1),
            beta,
            &mut out[z0 * plane..],
            (out_vox, 1),
        );
        z0 += zn;
    }
}

/// Unfolds output depths `z0..z0+zn` into a `(cin·k³) × (zn·oh·ow)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    src: &[T],
    cin: usize,
    dims: [usize; 3],
    k: usize,
    pad: usize,
    od: [usize; 3],
    z0: usize,
    zn: usize,
    cols: &mut [T],
) {
    let [d, h, w] = dims;
    let [_, oh, ow] = od;
    let ncols = zn * oh * ow;
    let mut row = 0;
    for c in 0..cin {
        let chan = &src[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                    let x_lo = pad.saturating_sub(kx).min(ow);
                    let x_hi = (w + pad).saturating_sub(kx).min(ow);
                    for zz in 0..zn {
                        let iz = (z0 + zz + kz) as isize - pad as isize;
                        for y in 0..oh {
                            let iy = (y + ky) as isize - pad as isize;
                            let dst = &mut dst_row[(zz * oh + y) * ow..(zz * oh + y + 1) * ow];
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize || x_lo >= x_hi
                            {
                                dst.fill(T::zero());
                                continue;
                            }
                            let base = (iz as usize * h + iy as usize) * w;
                            dst[..x_lo].fill(T::zero());
                            dst[x_hi..].fill(T::zero());
                            let ix0 = base + x_lo + kx - pad;
                            dst[x_lo..x_hi].copy_from_slice(&chan[ix0..ix0 + (x_hi - x_lo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six-nested-loop oracle, independent of the lowering above.
    fn conv_naive(input: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let [n, cin, d, h, w] = input.shape();
        let (cout, k) = (p.out_channels(), p.kernel_size());
        let (od, oh, ow) = (d - k + 1, h - k + 1, w - k + 1);
        let mut out = Tensor::zeros([n, cout, od, oh, ow]);
        for b in 0..n {
            for o in 0..cout {
                for z in 0..od {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = p.bias[o];
                            for i in 0..cin {
                                for dz in 0..k {
                                    for dy in 0..k {
                                        for dx in 0..k {
                                            acc += input.at(b, i, z + dz, y + dy, x + dx)
                                                * p.kernel.at(o, i, dz, dy, dx);
                                        }
                                    }
                                }
                            }
                            let off = out.offset(b, o, z, y, x);
                            out.data_mut()[off] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_params(cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvParams<f64> {
        ConvParams {
            kernel: random_tensor([cout, cin, k, k, k], rng),
            bias: (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor([1, 1, 3, 4, 5], &mut rng);
        let mut p = ConvParams::<f64>::zeros(1, 1, 1);
        p.kernel.data_mut()[0] = 1.0;
        assert_eq!(conv3d_forward(&input, &p).unwrap(), input);
    }

    #[test]
    fn zero_input_gives_bias() {
        let input = Tensor::<f64>::zeros([1, 2, 4, 4, 4]);
        let mut p = ConvParams::<f64>::zeros(3, 2, 3);
        p.bias = vec![0.7; 3];
        let out = conv3d_forward(&input, &p).unwrap();
        assert_eq!(out.shape(), [1, 3, 2, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_tensor([1, 2, 5, 5, 5], &mut rng);
        let p = random_params(3, 2, 3, &mut rng);
        let fast = conv3d_forward(&input, &p).unwrap();
        let slow = conv_naive(&input, &p);
        assert!(max_rel(fast.data(), slow.data()) < 1e-12);

        for trial in 0..20 {
            let k = [1, 2, 3][trial % 3];
            let shape = [
                1 + trial % 2,
                1 + rng.random_range(0..3),
                rng.random_range(k..=8),
                rng.random_range(k..=8),
                rng.random_range(k..=8),
            ];
            let input = random_tensor(shape, &mut rng);
            let p = random_params(rng.random_range(1..4), shape[1], k, &mut rng);
            let fast = conv3d_forward(&input, &p).unwrap();
            let slow = conv_naive(&input, &p);
            assert!(max_rel(fast.data(), slow.data()) < 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <grad_out, conv(x)> differentiated exactly: compare against the
        // naive adjoint sums.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor([2, 2, 5, 6, 4], &mut rng);
        let p = random_params(3, 2, 3, &mut rng);
        let out = conv3d_forward(&input, &p).unwrap();
        let g = random_tensor(out.shape(), &mut rng);
        let grads = conv3d_backward(&input, &p, &g).unwrap();

        let [n, cin, ..] = input.shape();
        let [_, cout, od, oh, ow] = out.shape();
        let mut gin = Tensor::<f64>::zeros(input.shape());
        let mut gk = Tensor::<f64>::zeros(p.kernel.shape());
        for b in 0..n {
            for o in 0..cout {
                for z in 0..od {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = g.at(b, o, z, y, x);
                            for i in 0..cin {
                                for dz in 0..3 {
                                    for dy in 0..3 {
                                        for dx in 0..3 {
                                            let ii = gin.offset(b, i, z + dz, y + dy, x + dx);
                                            gin.data_mut()[ii] += gv * p.kernel.at(o, i, dz, dy, dx);
                                            let ki = gk.offset(o, i, dz, dy, dx);
                                            gk.data_mut()[ki] += gv * input.at(b, i, z + dz, y + dy, x + dx);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        assert!(max_rel(grads.input.data(), gin.data()) < 1e-10);
        assert!(max_rel(grads.kernel.data(), gk.data()) < 1e-10);
        let gb: Vec<f64> = (0..cout)
            .map(|o| (0..n).map(|b| g.channel(b, o).iter().sum::<f64>()).sum())
            .collect();
        assert!(max_rel(&grads.bias, &gb) < 1e-12);
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_tensor([1, 2, 4, 4, 4], &mut rng);
        let p = random_params(2, 2, 3, &mut rng);
        let g = Tensor::zeros([1, 2, 2, 2, 2]);
        let grads = conv3d_backward(&input, &p, &g).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.kernel.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_voxel_grad_gives_input_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_tensor([1, 1, 5, 5, 5], &mut rng);
        let p = random_params(1, 1, 3, &mut rng);
        let mut g = Tensor::zeros([1, 1, 3, 3, 3]);
        let off = g.offset(0, 0, 1, 2, 0);
        g.data_mut()[off] = 1.0;
        let grads = conv3d_backward(&input, &p, &g).unwrap();
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    assert_eq!(grads.kernel.at(0, 0, dz, dy, dx), input.at(0, 0, 1 + dz, 2 + dy, dx));
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let input = Tensor::<f64>::zeros([1, 2, 4, 4, 4]);
        assert!(conv3d_forward(&input, &ConvParams::zeros(1, 3, 3)).is_err());
        assert!(conv3d_forward(&input, &ConvParams::zeros(1, 2, 5)).is_err());
        let p = ConvParams::zeros(1, 2, 3);
        assert!(conv3d_backward(&input, &p, &Tensor::zeros([1, 1, 3, 2, 2])).is_err());
    }
}
