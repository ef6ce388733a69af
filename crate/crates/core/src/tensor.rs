//! Dense rank-4 tensors in NCHW layout.
//!
//! Everything in the crate is expressed over `Tensor4`: feature maps use all
//! four axes, matrices are `(rows, cols, 1, 1)`, vectors `(1, d, 1, 1)`, and
//! scalars `(1, 1, 1, 1)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape of a rank-4 tensor: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    /// Matrix shape `(rows, cols, 1, 1)`.
    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape4 { n: rows, c: cols, h: 1, w: 1 }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat row-major index of `(n, c, h, w)`.
    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// True when the last two axes are trivial, i.e. the tensor is a matrix.
    pub fn is_matrix(&self) -> bool {
        self.h == 1 && self.w == 1
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW tensor with an optional gradient buffer.
#[derive(Clone, Debug)]
pub struct Tensor4<S: Scalar> {
    data: Vec<S>,
    shape: Shape4,
    /// Whether gradients should flow into this tensor when used as a leaf.
    pub requires_grad: bool,
    /// Gradient of the same shape, populated after a backward pass.
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor4<S> {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 { data: vec![S::zero(); shape.numel()], shape, requires_grad: false, grad: None }
    }

    pub fn ones(shape: Shape4) -> Self {
        Self::filled(shape, S::one())
    }

    pub fn filled(shape: Shape4, value: S) -> Self {
        Tensor4 { data: vec![value; shape.numel()], shape, requires_grad: false, grad: None }
    }

    /// Wrap existing data; errors when the length does not match the shape.
    pub fn from_vec(shape: Shape4, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor4 { data, shape, requires_grad: false, grad: None })
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: S) -> Self {
        Tensor4 {
            data: vec![value],
            shape: Shape4::new(1, 1, 1, 1),
            requires_grad: false,
            grad: None,
        }
    }

    /// Matrix `(rows, cols, 1, 1)` from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::from_vec(Shape4::matrix(rows, cols), data)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.shape.idx(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: S) {
        let i = self.shape.idx(n, c, h, w);
        self.data[i] = value;
    }

    /// Builder-style toggle for the gradient flag.
    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    /// Value of a rank-0 tensor.
    pub fn scalar_value(&self) -> S {
        debug_assert!(self.shape.is_scalar(), "scalar_value on shape {}", self.shape);
        self.data[0]
    }

    /// Row `r` of a matrix-shaped tensor, as a slice of length `c`.
    pub fn row(&self, r: usize) -> &[S] {
        debug_assert!(self.shape.is_matrix());
        &self.data[r * self.shape.c..(r + 1) * self.shape.c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Shape4) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} elements to {shape}",
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor4 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            shape: self.shape,
            requires_grad: false,
            grad: None,
        }
    }

    /// Convert element-wise to another scalar type (used by checkpoints).
    pub fn convert<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4 {
            data: self.data.iter().map(|&v| T::cast(v.as_f64())).collect(),
            shape: self.shape,
            requires_grad: false,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major_nchw() {
        let s = Shape4::new(2, 3, 4, 5);
        assert_eq!(s.idx(0, 0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 0, 1), 1);
        assert_eq!(s.idx(0, 0, 1, 0), 5);
        assert_eq!(s.idx(0, 1, 0, 0), 20);
        assert_eq!(s.idx(1, 0, 0, 0), 60);
        assert_eq!(s.numel(), 120);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4::<f64>::from_vec(Shape4::new(1, 2, 1, 1), vec![0.0; 3]).is_err());
        assert!(Tensor4::<f64>::from_vec(Shape4::new(1, 3, 1, 1), vec![0.0; 3]).is_ok());
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor4::scalar(2.5f64);
        assert!(t.shape().is_scalar());
        assert_eq!(t.scalar_value(), 2.5);
    }
}
