//! Dense row-major tensors over f32 (runtime) or f64 (oracle/gradient tests).

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type for tensors. `f32` is the runtime dtype; `f64` backs the
/// high-precision test path.
pub trait Elem:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    /// Shorthand for converting an `f64` literal into this element type.
    fn fl(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Elem for f32 {
    const DTYPE: Dtype = Dtype::F32;
}

impl Elem for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Dense N-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Elem = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Elem> Tensor<T> {
    /// Builds a tensor, validating extent product and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidArg {
                op: "Tensor::from_vec",
                msg: format!("shape {:?} does not match data length {}", shape, data.len()),
            });
        }
        let t = Tensor { shape: shape.to_vec(), data };
        t.check_finite("Tensor::from_vec")?;
        Ok(t)
    }

    /// Like `from_vec` without the finiteness scan. For internal kernels that
    /// guarantee finite outputs by construction.
    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::InvalidArg {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub(crate) fn reshaped(mut self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    /// Value at a multi-index. Test/debug convenience, not a hot path.
    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, &x) in idx.iter().enumerate() {
            assert!(x < self.shape[i], "index out of range");
            off = off * self.shape[i] + x;
        }
        self.data[off]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &x) in idx.iter().enumerate() {
            off = off * self.shape[i] + x;
        }
        self.data[off] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.zip(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: T) -> Self {
        self.map(|v| v + c)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| if v < lo { lo } else if v > hi { hi } else { v })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len().max(1)).unwrap()
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    /// Squared L2 norm.
    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn l2_norm(&self) -> T {
        self.sq_norm().sqrt()
    }

    /// 2-D transpose.
    pub fn t2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidArg {
                op: "t2",
                msg: format!("expected rank 2, got {:?}", self.shape),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![T::zero(); m * n];
        crate::kernel::matmul_nn(&self.data, &rhs.data, &mut out, m, k, n);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Row-wise softmax of `x * scale` with max-subtraction.
    pub fn softmax_rows(&self, scale: T) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidArg {
                op: "softmax_rows",
                msg: format!("expected rank 2, got {:?}", self.shape),
            });
        }
        if !(scale > T::zero()) {
            return Err(Error::InvalidArg {
                op: "softmax_rows",
                msg: format!("scale must be positive, got {}", scale),
            });
        }
        self.check_finite("softmax_rows input")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = self.data.clone();
        crate::kernel::softmax_rows_inplace(&mut out, m, n, scale);
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }

    /// Lossless widening / narrowing conversion between element types.
    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

impl<T: Elem> fmt::Display for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

/// 2-D cross-correlation over NCHW input, OIHW weights.
///
/// Output spatial extent: (in + 2*pad - k) / stride + 1.
pub fn conv2d<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::InvalidArg {
            op: "conv2d",
            msg: format!("expected NCHW input and OIHW weight, got {:?} / {:?}", x.shape, w.shape),
        });
    }
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oc, ic, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if ic != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d (channels)",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    if b.shape() != [oc] {
        return Err(Error::ShapeMismatch {
            op: "conv2d (bias)",
            lhs: b.shape().to_vec(),
            rhs: vec![oc],
        });
    }
    if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::InvalidArg {
            op: "conv2d",
            msg: format!(
                "kernel {}x{} does not fit padded input {}x{} (pad {})",
                kh, kw, h, wd, pad
            ),
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![T::zero(); n * oc * oh * ow];
    crate::kernel::conv2d_forward(
        &x.data, &w.data, &b.data, &mut out,
        crate::kernel::ConvDims { n, c, h, w: wd, oc, kh, kw, stride, pad, oh, ow },
    );
    Ok(Tensor { shape: vec![n, oc, oh, ow], data: out })
}

/// Group normalization over NCHW with per-channel affine.
pub fn group_norm<T: Elem>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::InvalidArg {
            op: "group_norm",
            msg: format!("expected NCHW, got {:?}", x.shape),
        });
    }
    let c = x.shape[1];
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArg {
            op: "group_norm",
            msg: format!("groups {} does not divide channels {}", groups, c),
        });
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "group_norm (affine)",
            lhs: gamma.shape().to_vec(),
            rhs: vec![c],
        });
    }
    let (n, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
    let mut out = vec![T::zero(); x.numel()];
    let mut mean = vec![T::zero(); n * groups];
    let mut inv_std = vec![T::zero(); n * groups];
    crate::kernel::group_norm_forward(
        &x.data, &gamma.data, &beta.data, &mut out, &mut mean, &mut inv_std,
        n, c, h, w, groups, eps,
    );
    Ok(Tensor { shape: x.shape.clone(), data: out })
}
