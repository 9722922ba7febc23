//! Dense row-major tensors and a tape-based reverse-mode differentiator.

mod io;
pub mod linalg;
mod tape;

pub(crate) use io::read_u32;
pub use tape::{BackwardRule, ReduceKind, SparseRows, Tape, Var};

use crate::error::{bail, Result};

/// Scalar type for features, weights and activations.
#[cfg(not(feature = "f32"))]
pub type Float = f64;
/// Scalar type for features, weights and activations.
#[cfg(feature = "f32")]
pub type Float = f32;

/// Dense n-dimensional array with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<Float>,
    requires_grad: bool,
    grad: Option<Vec<Float>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<Float>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            bail!(
                Dimension,
                "shape {:?} holds {} values, got {}",
                shape,
                numel,
                values.len()
            );
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Float) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(value: Float) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(values: Vec<Float>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a `[rows.len(), width]` matrix. Fails on ragged rows.
    pub fn from_rows(rows: &[Vec<Float>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * width);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                bail!(
                    Dimension,
                    "row {i} has {} values, expected {width}",
                    r.len()
                );
            }
            values.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), width], values)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Leading dimension; 1 for scalars.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of every dimension after the first.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn values(&self) -> &[Float] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Float] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Float> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[Float] {
        let w = self.row_len();
        &self.values[i * w..(i + 1) * w]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<Float> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub fn grad(&self) -> Option<&[Float]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient. Ignored unless `requires_grad`.
    pub fn accumulate_grad(&mut self, delta: &[Float]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), self.values.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    fn accumulate_grad_owned(&mut self, delta: Vec<Float>) {
        if !self.requires_grad {
            return;
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            None => self.grad = Some(delta),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<Float>> {
        self.grad.take()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.values.len() {
            bail!(
                Dimension,
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            );
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::scalar(2.0).numel(), 1);
    }

    #[test]
    fn no_grad_tensor_never_accumulates() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 1.0]);
        assert!(t.grad().is_none());
        let mut t = t.with_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
    }
}
