//! Minimal reverse-mode autodiff engine over 4-d `(batch, channels, height,
//! width)` tensors, with exactly the layers the segmentation models need.

pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod params;
mod tape;


pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use optim::{AdamW, AdamWConfig, Optimizer, OptimizerKind, Sgd};
pub use params::{Binding, ParamKind, ParamStore, Parameter, StateDict};
pub use tape::{BatchNormStats, DiceReduction, Mode, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape of a 4-d tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    /// Per-channel vector shape `(1, c, 1, 1)`.
    pub const fn channels(c: usize) -> Self {
        Self::new(1, c, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension(format!(
                "shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_f64(shape: Shape, values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<T>> {
        self.grad.as_mut()
    }

    /// Replaces the gradient buffer; its length must equal the data length.
    pub fn set_grad(&mut self, grad: Option<Vec<T>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::Dimension(format!(
                    "gradient of length {} for tensor of shape {}",
                    g.len(),
                    self.shape
                )));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    /// Single value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns an error naming `what` if any value is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "non-finite value produced by {what}"
            )))
        }
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} into {}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Stacks single-item tensors of identical `(c,h,w)` along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero tensors".into()))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::Dimension(format!("cannot stack {s} with {first}")));
            }
            data.extend_from_slice(&t.data);
            n += s.n;
        }
        Self::from_vec(Shape::new(n, first.c, first.h, first.w), data)
    }

    /// Copy of batch item `i` as a `(1, c, h, w)` tensor.
    pub fn batch_item(&self, i: usize) -> Self {
        let s = self.shape;
        let len = s.c * s.plane();
        let data = self.data[i * len..(i + 1) * len].to_vec();
        Self::from_vec(Shape::new(1, s.c, s.h, s.w), data).expect("slice length matches")
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(Shape::new(1, 2, 2, 2), vec![0.0; 7]).is_err());
        let t = Tensor::<f64>::from_vec(Shape::new(1, 2, 2, 2), vec![0.0; 8]).unwrap();
        assert_eq!(t.numel(), 8);
    }

    #[test]
    fn grad_must_match_length() {
        let mut t = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        assert!(t.set_grad(Some(vec![0.0; 3])).is_err());
        t.set_grad(Some(vec![1.0; 4])).unwrap();
        assert_eq!(t.grad().unwrap().len(), 4);
    }

    #[test]
    fn stack_and_split_batch() {
        let a = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 1.0);
        let b = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 2.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 1, 2, 2));
        assert_eq!(s.batch_item(1), b);
    }

    #[test]
    fn non_finite_is_reported() {
        let t = Tensor::<f64>::from_vec(Shape::scalar(), vec![f64::NAN]).unwrap();
        assert!(matches!(t.check_finite("test"), Err(Error::Numeric(_))));
    }
}
