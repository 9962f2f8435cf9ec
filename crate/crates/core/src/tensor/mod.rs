//! Dense row-major tensors with an optional gradient slot.
//!
//! Eager methods on [`Tensor`] compute values only. Differentiable
//! computations are recorded on a [`Tape`] and differentiated with
//! [`Tape::backward`].

pub mod gradcheck;
pub mod io;
pub mod kernels;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheckReport, Stencil};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, T::one())
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![v; n]).expect("filled shape is consistent")
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![1], vec![v]).expect("scalar shape")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builder form of [`Tensor::set_requires_grad`].
    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Adds `g` into the gradient slot, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Drops the gradient slot entirely.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Rows and columns when the last axis is viewed as columns.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensor has at least one axis");
        (self.data.len() / cols, cols)
    }

    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::dim(op, &self.shape, &[])),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let t = Self::new(shape.to_vec(), self.data.clone())?;
        Ok(t.with_requires_grad(self.requires_grad))
    }

    /// Converts elements to another scalar type (value only, no grad).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// A value-only copy (gradient slot dropped).
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        Self::new(vec![m, n], kernels::matmul(&self.data, &other.data, m, k, n))
    }

    /// Matrix-vector product `self[m×k] · x[k]`.
    pub fn matvec(&self, x: &Self) -> Result<Self> {
        let (m, k) = self.matrix_dims("matvec")?;
        if x.shape != [k] {
            return Err(Error::dim("matvec", &self.shape, &x.shape));
        }
        Self::new(vec![m], kernels::matmul(&self.data, &x.data, m, k, 1))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.matrix_dims("transpose")?;
        Self::new(vec![c, r], kernels::transpose(&self.data, r, c))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
            .expect("map preserves shape")
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(kernels::sigmoid)
    }

    pub fn gelu(&self) -> Self {
        self.map(kernels::gelu)
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Self {
        let (_, cols) = self.rows_cols();
        Self::new(self.shape.clone(), kernels::softmax_rows(&self.data, cols))
            .expect("softmax preserves shape")
    }

    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        let (_, d) = self.rows_cols();
        if gamma.shape != [d] || beta.shape != [d] {
            return Err(Error::dim("layer_norm", &self.shape, &gamma.shape));
        }
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let (out, _, _) = kernels::layer_norm_rows(&self.data, &gamma.data, &beta.data, d, eps);
        Self::new(self.shape.clone(), out)
    }

    pub fn sum(&self) -> T {
        kernels::sum(&self.data)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
        let b = t(&[2, 1], &[5., 6.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a: Tensor<f64> = Tensor::zeros(&[2, 3]);
        let b: Tensor<f64> = Tensor::zeros(&[2, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::<f64>::ones(&[4]);
        let zero = Tensor::<f64>::zeros(&[4]);
        let y = t(&[4], &[5., 5., 5., 5.]).layer_norm(&one, &zero, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let y = t(&[2], &[1., -1.])
            .layer_norm(&Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-12)
            .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);

        let y = t(&[2], &[3., -8.])
            .layer_norm(&Tensor::zeros(&[2]), &t(&[2], &[7., 7.]), 1e-6)
            .unwrap();
        assert_eq!(y.data(), &[7., 7.]);

        let err = t(&[2], &[1., 2.]).layer_norm(&one, &zero, 1e-6);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn grad_accumulates_until_reset() {
        let mut x = Tensor::<f64>::zeros(&[2]);
        x.accumulate_grad(&[1.0, 2.0]).unwrap();
        x.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(x.grad().unwrap(), &[2.0, 4.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }
}
