//! Dense NCHW tensors.
//!
//! A [`Tensor`] is an immutable, cheaply clonable block of values with a fixed
//! four-dimensional shape. Every feature map, image, mask and parameter in the
//! crate is one of these. Per-channel statistics are stored as `[N, C, 1, 1]`
//! and scalars as `[1, 1, 1, 1]`.

use std::fmt;
use std::sync::Arc;

use num_traits::Float;
use thiserror::Error;

/// Scalar type a tensor can hold.
///
/// Training runs in `f32`; gradient checks instantiate the same code at `f64`.
pub trait Element: Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static {
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c <- alpha * a * b + beta * c` on strided row-major matrices.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping matrices
    /// of shapes `m x k`, `k x n` and `m x n`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix view description used by [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl MatLayout {
    pub fn plain(rows: usize, cols: usize) -> Self {
        MatLayout { rows, cols, transposed: false }
    }

    /// A `rows x cols` view of data stored as `cols x rows`.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        MatLayout { rows, cols, transposed: true }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c <- a * b + beta * c` with bounds checked slices.
pub(crate) fn gemm<T: Element>(a: &[T], la: MatLayout, b: &[T], lb: MatLayout, c: &mut [T], beta: T) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    assert!(a.len() >= la.rows * la.cols);
    assert!(b.len() >= lb.rows * lb.cols);
    assert!(c.len() >= la.rows * lb.cols);
    let (rsa, csa) = la.strides();
    let (rsb, csb) = lb.strides();
    // SAFETY: lengths checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            lb.cols as isize,
            1,
        );
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: {dim} mismatch (expected {expected}, got {actual})")]
    ShapeMismatch { op: &'static str, dim: &'static str, expected: usize, actual: usize },
    #[error("data length {actual} does not match shape {shape} ({expected} elements)")]
    DataLength { shape: Shape, expected: usize, actual: usize },
    #[error("{op}: shapes {lhs} and {rhs} are not broadcast compatible")]
    Broadcast { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("mask for batch item {batch} has no foreground pixels")]
    EmptyMask { batch: usize },
    #[error("backward requires a single-element loss, got shape {0}")]
    NotScalar(Shape),
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::InvalidArgument { op, reason: reason.into() }
    }
}

/// NCHW extents.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_spatial(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

/// Immutable NCHW array. Clones share storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength { shape, expected: shape.numel(), actual: data.len() });
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    /// Builds a tensor from data that is known to match `shape`.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor::from_parts(shape, vec![value; shape.numel()])
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor::from_parts(shape, data)
    }

    /// Convenience constructor from `f64` values, mostly for tests.
    pub fn from_f64(shape: Shape, values: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self, TensorError> {
        if shape.numel() != self.numel() {
            return Err(TensorError::DataLength { shape, expected: shape.numel(), actual: self.numel() });
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        if let Some(same) = (self as &dyn std::any::Any).downcast_ref::<Tensor<U>>() {
            return same.clone();
        }
        Tensor::from_parts(self.shape, self.data.iter().map(|v| U::of(v.as_f64())).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of batch item `n` as a `[1, C, H, W]` tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.shape.c * self.shape.plane();
        let start = n * per;
        Tensor::from_parts(Shape { n: 1, ..self.shape }, self.data[start..start + per].to_vec())
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self, TensorError> {
        let first = items.first().ok_or_else(|| TensorError::invalid("stack", "no tensors to stack"))?;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.shape.c, first.shape.h, first.shape.w) {
                return Err(TensorError::Broadcast { op: "stack", lhs: first.shape, rhs: s });
            }
            n += s.n;
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::from_parts(Shape { n, ..first.shape }, data))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{} ", T::NAME, self.shape)?;
        let head: Vec<_> = self.data.iter().take(SHOWN).collect();
        write!(f, "{head:?}")?;
        if self.numel() > SHOWN {
            write!(f, " ..")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        let err = Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 4, actual: 3, .. }));
    }

    #[test]
    fn offsets_are_row_major_nchw() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.offset(0, 0, 0, 1), 1);
        assert_eq!(s.offset(0, 0, 1, 0), 5);
        assert_eq!(s.offset(0, 1, 0, 0), 20);
        assert_eq!(s.offset(1, 0, 0, 0), 60);
        let t = Tensor::<f32>::from_fn(s, |n, c, h, w| (n * 1000 + c * 100 + h * 10 + w) as f32);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
    }

    #[test]
    fn stack_and_split_batches() {
        let a = Tensor::<f32>::full(Shape::new(1, 2, 2, 2), 1.0);
        let b = Tensor::<f32>::full(Shape::new(1, 2, 2, 2), 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 2, 2));
        assert_eq!(s.batch_item(0), a);
        assert_eq!(s.batch_item(1), b);
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        gemm(&a, MatLayout::plain(2, 3), &b, MatLayout::plain(3, 2), &mut c, 0.0);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // a^T (3x2) times a (2x3) read through the transposed layout
        let mut d = [0.0f64; 9];
        gemm(&a, MatLayout::transposed(3, 2), &a, MatLayout::plain(2, 3), &mut d, 0.0);
        assert_eq!(d[0], 1.0 * 1.0 + 4.0 * 4.0);
        assert_eq!(d[5], 2.0 * 3.0 + 5.0 * 6.0);
    }
}
