//! Dense 5-D tensors (batch, channel, depth, height, width), width fastest.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`; gradient checks run
/// in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// `c ← alpha·a·b + beta·c` for an `m×k` matrix `a` and a `k×n` matrix `b`,
    /// all described by (row, column) strides in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("real converts to f64")
    }
}

fn extent(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(extent(m, k, a_strides) <= a.len(), "gemm: lhs out of bounds");
                assert!(extent(k, n, b_strides) <= b.len(), "gemm: rhs out of bounds");
                assert!(extent(m, n, c_strides) <= c.len(), "gemm: output out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every element the kernel
                // touches for non-negative strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 5], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Spatial dims (depth, height, width).
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        let [_, cs, d, h, w] = self.shape;
        (((n * cs + c) * d + z) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, z, y, x)]
    }

    /// Contiguous `[channels, d, h, w]` block of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let stride = self.shape[1] * self.voxels();
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let stride = self.shape[1] * self.voxels();
        &mut self.data[n * stride..(n + 1) * stride]
    }

    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &self.data[start..start + v]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &mut self.data[start..start + v]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        expect_shape("add", other.shape, self.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

pub(crate) fn expect_shape(what: &str, got: [usize; 5], want: [usize; 5]) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{what}: shape {got:?} does not match expected {want:?}"
        )))
    }
}

/// Center crop of every spatial axis to `size`. The margin on each side is
/// `(side - size) / 2`; the caller guarantees it is integral.
pub fn crop_center<T: Real>(t: &Tensor<T>, size: [usize; 3]) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = t.shape();
    let offs = crop_offsets([d, h, w], size)?;
    let mut out = Tensor::zeros([n, c, size[0], size[1], size[2]]);
    for b in 0..n {
        for ch in 0..c {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let src = t.offset(b, ch, z + offs[0], y + offs[1], offs[2]);
                    let dst = out.offset(b, ch, z, y, 0);
                    out.data[dst..dst + size[2]].copy_from_slice(&t.data[src..src + size[2]]);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`crop_center`]: adds `grad` into the center region of `into`.
pub fn uncrop_add<T: Real>(grad: &Tensor<T>, into: &mut Tensor<T>) -> Result<()> {
    let [n, c, d, h, w] = into.shape();
    let size = grad.spatial();
    if grad.batch() != n || grad.channels() != c {
        return Err(Error::Contract("uncrop: batch/channel mismatch".into()));
    }
    let offs = crop_offsets([d, h, w], size)?;
    for b in 0..n {
        for ch in 0..c {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let src = grad.offset(b, ch, z, y, 0);
                    let dst = into.offset(b, ch, z + offs[0], y + offs[1], offs[2]);
                    for (o, &g) in into.data[dst..dst + size[2]]
                        .iter_mut()
                        .zip(&grad.data[src..src + size[2]])
                    {
                        *o += g;
                    }
                }
            }
        }
    }
    Ok(())
}

fn crop_offsets(full: [usize; 3], size: [usize; 3]) -> Result<[usize; 3]> {
    let mut offs = [0; 3];
    for a in 0..3 {
        if size[a] > full[a] || (full[a] - size[a]) % 2 != 0 {
            return Err(Error::Contract(format!(
                "cannot center-crop {full:?} to {size:?}"
            )));
        }
        offs[a] = (full[a] - size[a]) / 2;
    }
    Ok(offs)
}

/// Concatenates along the channel axis; spatial dims must agree.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.batch() != b.batch() || a.spatial() != b.spatial() {
        return Err(Error::Contract(format!(
            "concat: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let [n, ca, d, h, w] = a.shape();
    let cb = b.channels();
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec([n, ca + cb, d, h, w], data)
}

/// Splits a channel-concatenated tensor back into its first `first`
/// channels and the rest.
pub fn split_channels<T: Real>(t: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, d, h, w] = t.shape();
    if first > c {
        return Err(Error::Contract("split: channel index out of range".into()));
    }
    let v = d * h * w;
    let mut a = Vec::with_capacity(n * first * v);
    let mut b = Vec::with_capacity(n * (c - first) * v);
    for i in 0..n {
        let item = t.item(i);
        a.extend_from_slice(&item[..first * v]);
        b.extend_from_slice(&item[first * v..]);
    }
    Ok((
        Tensor::from_vec([n, first, d, h, w], a)?,
        Tensor::from_vec([n, c - first, d, h, w], b)?,
    ))
}
