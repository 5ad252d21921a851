//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values that persist between passes (parameters, data batches) are plain
//! [`Tensor`]s in 32-bit floats. A forward pass records operations on a
//! [`Graph`], which is generic over the working precision so the same model
//! code can be evaluated in `f32` for training and in `f64` for shadow checks
//! and finite-difference oracles.

mod cache;
mod element;
mod graph;
mod hvp;

pub use cache::SharedInputCache;
pub use element::{gelu, gelu_grad, gelu_second, std_normal_cdf, std_normal_pdf, Element};
pub use graph::{Graph, Var};
pub use hvp::{finite_difference_step, hvp};

use crate::error::{Error, Result};

/// An n-dimensional row-major `f32` buffer with an optional gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements but buffer has {}",
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

    /// A trainable tensor: participates in the gradient graph when bound.
    pub fn param(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::DimensionMismatch {
                expected: self.data.len(),
                actual: delta.len(),
            });
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    /// Rows `indices` of a 2-D tensor (or entries of a 1-D tensor).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let row_len: usize = self.shape.iter().skip(1).product();
        let rows = self.shape.first().copied().unwrap_or(0);
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            if i >= rows {
                return Err(Error::Shape(format!("row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&self.data[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            return Err(Error::Shape("cannot select rows of a scalar".into()));
        }
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }
}
