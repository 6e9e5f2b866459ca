//! Dense N-dimensional tensor and the numeric kernels every layer is built on.
//!
//! Layout is row-major with the last dimension contiguous; image batches are
//! `N x H x W x C`. Tensors are immutable values: every public operation is a
//! pure function returning a fresh tensor, so sharing across threads for
//! reading is always safe. Kernels are sequential and therefore bitwise
//! deterministic for a fixed input.

pub(crate) mod conv;

pub use conv::{conv2d, pool2d, Padding, PoolKind, Pooled};

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Scalar element type for tensors: `f32` for training throughput and
/// checkpoints, `f64` for gradient verification.
pub trait Element:
    Float + num_traits::NumAssignOps + Copy + Send + Sync + Default + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Shape construction rejected: empty, rank > 4, zero extent, or overflow.
    InvalidShape(String),
    /// Two operands whose shapes must agree do not; names the operation.
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    /// Matmul inner extents differ.
    InnerDimMismatch { left: Shape, right: Shape },
    /// An operation got a tensor of the wrong rank.
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: Shape,
    },
    /// Convolution kernel exceeds the padded input extent.
    KernelTooLarge {
        kernel: (usize, usize),
        padded: (usize, usize),
    },
    /// Pooling window exceeds an input extent.
    WindowTooLarge { window: usize, input: (usize, usize) },
    /// Stride must be at least 1.
    ZeroStride,
    /// Reshape target holds a different number of elements.
    ElemCountMismatch { from: Shape, to: Shape },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::InvalidShape(why) => write!(f, "invalid shape: {why}"),
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left} vs {right}")
            }
            TensorError::InnerDimMismatch { left, right } => {
                write!(f, "matmul: inner extents differ, {left} x {right}")
            }
            TensorError::RankMismatch { op, expected, got } => {
                write!(f, "{op}: expected rank {expected}, got shape {got}")
            }
            TensorError::KernelTooLarge { kernel, padded } => write!(
                f,
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                kernel.0, kernel.1, padded.0, padded.1
            ),
            TensorError::WindowTooLarge { window, input } => write!(
                f,
                "pool2d: window {} exceeds input {}x{}",
                window, input.0, input.1
            ),
            TensorError::ZeroStride => write!(f, "stride must be >= 1"),
            TensorError::ElemCountMismatch { from, to } => {
                write!(f, "reshape: {from} has a different element count than {to}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Ordered list of positive extents, rank 1 to 4. Image tensors use
/// `N x H x W x C` order.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(TensorError::InvalidShape(format!(
                "rank must be 1..={MAX_RANK}, got {}",
                dims.len()
            )));
        }
        let mut count: usize = 1;
        for &d in dims {
            if d == 0 {
                return Err(TensorError::InvalidShape("zero extent".into()));
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| TensorError::InvalidShape("element count overflow".into()))?;
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn elem_count(&self) -> usize {
        self.0.iter().product()
    }

    /// Inner extents match for `self x rhs` matrix multiplication.
    pub fn matmul_compatible(&self, rhs: &Shape) -> bool {
        self.rank() == 2 && rhs.rank() == 2 && self.0[1] == rhs.0[0]
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = TensorError;
    fn try_from(dims: Vec<usize>) -> Result<Self, TensorError> {
        Shape::new(&dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Vec<usize> {
        s.0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Dense tensor of real values, row-major, last dimension contiguous.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.elem_count() {
            return Err(TensorError::InvalidShape(format!(
                "shape {} implies {} elements, data has {}",
                shape,
                shape.elem_count(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_dims(dims: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        Tensor::new(Shape::new(dims)?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.elem_count();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        let n = shape.elem_count();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Element at a full multi-index. Intended for tests and small tensors;
    /// kernels index raw slices directly.
    pub fn get(&self, index: &[usize]) -> T {
        let dims = self.shape.dims();
        assert_eq!(index.len(), dims.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(dims).enumerate() {
            assert!(ix < d, "index {ix} out of range for dim {i} (extent {d})");
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, rhs: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_map(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_map(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_map(rhs, "mul", |a, b| a * b)
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.map(|v| v + s)
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    /// Pointwise maximum against a scalar (the ReLU building block).
    pub fn max_scalar(&self, s: T) -> Tensor<T> {
        self.map(|v| if v > s { v } else { s })
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor<T>, TensorError> {
        let to = Shape::new(dims)?;
        if to.elem_count() != self.shape.elem_count() {
            return Err(TensorError::ElemCountMismatch {
                from: self.shape.clone(),
                to,
            });
        }
        Ok(Tensor {
            shape: to,
            data: self.data.clone(),
        })
    }

    pub fn transpose2d(&self) -> Result<Tensor<T>, TensorError> {
        let [m, n] = rank2(&self.shape, "transpose2d")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_dims(&[n, m], out)
    }

    /// Standard matrix product `[M x K] x [K x N] -> [M x N]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let [m, k] = rank2(&self.shape, "matmul")?;
        let [k2, n] = rank2(&rhs.shape, "matmul")?;
        if k != k2 {
            return Err(TensorError::InnerDimMismatch {
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_slices(&self.data, &rhs.data, m, k, n, &mut out);
        Tensor::from_dims(&[m, n], out)
    }
}

pub(crate) fn rank2(shape: &Shape, op: &'static str) -> Result<[usize; 2], TensorError> {
    match shape.dims() {
        &[a, b] => Ok([a, b]),
        _ => Err(TensorError::RankMismatch {
            op,
            expected: 2,
            got: shape.clone(),
        }),
    }
}

pub(crate) fn rank4(shape: &Shape, op: &'static str) -> Result<[usize; 4], TensorError> {
    match shape.dims() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::RankMismatch {
            op,
            expected: 4,
            got: shape.clone(),
        }),
    }
}

/// `out += a x b` over raw row-major slices. `out` must hold `m*n` zeros (or
/// a partial sum to accumulate into). The k-loop is hoisted so the inner loop
/// runs over contiguous rows of `b` and `out`.
pub(crate) fn matmul_slices<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a^T x b` where `a` is `[p x m]` and `b` is `[p x n]`.
pub(crate) fn matmul_at_b<T: Element>(a: &[T], b: &[T], p: usize, m: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    for row in 0..p {
        let arow = &a[row * m..(row + 1) * m];
        let brow = &b[row * n..(row + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a x b^T` where `a` is `[m x p]` and `b` is `[n x p]`. Each output
/// element is a dot product of two contiguous rows.
pub(crate) fn matmul_a_bt<T: Element>(a: &[T], b: &[T], m: usize, p: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// Row-wise softmax over `[N x K]` logits, computed with max-subtraction so
/// large logits cannot overflow the exponential.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let [n, k] = rank2(logits.shape(), "softmax")?;
    let mut out = vec![T::zero(); n * k];
    for row in 0..n {
        let src = &logits.data()[row * k..(row + 1) * k];
        let dst = &mut out[row * k..(row + 1) * k];
        let mut max = src[0];
        for &v in src {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            let e = (v - max).exp();
            *d = e;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    Tensor::from_dims(&[n, k], out)
}
