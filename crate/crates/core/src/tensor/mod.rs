//! Dense row-major f64 tensors and reverse-mode differentiation.

mod graph;
mod optim;

pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig};

use std::sync::Arc;

use crate::error::{CafoError, Result};

/// Dense tensor: a shape and a flat row-major buffer of 64-bit reals.
///
/// The buffer is reference-counted, so cloning a tensor is cheap and the
/// differentiation graph can hold values without copying them. Tensors are
/// immutable values; mutation goes through [`Tensor::data_mut`], which
/// copies on write when the buffer is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating the shape/length contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CafoError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} values, got {}", shape, expected, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CafoError::NonFinite { op: "Tensor::new" });
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    /// Build without the finiteness scan. For internal op outputs whose
    /// inputs were already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: Arc::new(data) }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the buffer; copies when shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(CafoError::ShapeMismatch {
                op: "Tensor::scalar_value",
                detail: format!("expected one element, shape is {:?}", self.shape),
            })
        }
    }

    /// Reinterpret the buffer under a new shape of equal length.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(CafoError::ShapeMismatch {
                op: "Tensor::reshaped",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Self { shape, data: Arc::clone(&self.data) })
    }

    /// Element at a 2-D index; rows are the leading dimension.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise in-place accumulation. Shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(CafoError::ShapeMismatch {
                op: "Tensor::add_assign",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
        Ok(())
    }
}
