//! Dense row-major tensors and the numeric kernels behind the graph ops.
//!
//! Image-like tensors use `[channels, height, width]` layout throughout the
//! crate; there is no batch axis (batches are loops over samples).

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::from_vec`] but panics on a size mismatch; for
    /// internal construction where the size is known by construction.
    pub(crate) fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{shape:?}");
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub(crate) fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Self {
        self.shape = shape.into();
        debug_assert_eq!(self.shape.iter().product::<usize>(), self.data.len());
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.numel().max(1)).unwrap()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// Rows × cols of a 2-D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.ndim(), 2, "expected 2-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Channels, height, width of a 3-D tensor.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.ndim(), 3, "expected 3-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn transpose2(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new([c, r], out)
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        Tensor::new([m, n], kernels::matmul(&self.data, &other.data, m, k, n, false, false))
    }

    /// Elements of the 2-D tensor's row `i`.
    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }
}

pub(crate) mod kernels {
    use super::*;

    /// `op(a)·op(b)` with `op` an optional transpose; `a` is stored as
    /// `m×k` (or `k×m` when `ta`), `b` as `k×n` (or `n×k` when `tb`).
    pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<T> {
        let mut c = vec![T::zero(); m * n];
        matmul_into(a, b, m, k, n, ta, tb, T::zero(), &mut c);
        c
    }

    #[allow(clippy::too_many_arguments)]
    pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, ta: bool, tb: bool, beta: T, c: &mut [T]) {
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c);
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct ConvGeom {
        pub channels: usize,
        pub height: usize,
        pub width: usize,
        pub kernel: usize,
        pub stride: usize,
        pub pad: usize,
    }

    impl ConvGeom {
        pub fn out_hw(&self) -> (usize, usize) {
            let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
            let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
            (oh, ow)
        }

        pub fn col_rows(&self) -> usize {
            self.channels * self.kernel * self.kernel
        }
    }

    /// Unfold `[C,H,W]` patches into a `(C·k·k) × (OH·OW)` matrix.
    pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
        let (oh, ow) = g.out_hw();
        let cols = oh * ow;
        let mut out = vec![T::zero(); g.col_rows() * cols];
        let k = g.kernel;
        for c in 0..g.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = (c * g.height + iy as usize) * g.width;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[oy * ow + ox] = x[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`im2col`]: scatter-add columns back into `[C,H,W]`.
    pub fn col2im<T: Scalar>(cols_data: &[T], g: &ConvGeom) -> Vec<T> {
        let (oh, ow) = g.out_hw();
        let cols = oh * ow;
        let mut out = vec![T::zero(); g.channels * g.height * g.width];
        let k = g.kernel;
        for c in 0..g.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols_data[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = (c * g.height + iy as usize) * g.width;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                out[dst_row + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn upsample_nearest2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = x[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        out
    }

    pub fn upsample_nearest2_backward<T: Scalar>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
                }
            }
        }
        out
    }

    /// Row-wise softmax of an `r×n` matrix.
    pub fn softmax_rows<T: Scalar>(x: &[T], r: usize, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); r * n];
        for i in 0..r {
            let row = &x[i * n..(i + 1) * n];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..n {
                let e = (row[j] - m).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        out
    }
}
