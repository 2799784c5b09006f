//! Minimal dense tensors with reverse-mode autodiff.
//!
//! Tensors are row-major `Vec<F>` plus a shape. All arithmetic that needs
//! gradients goes through [`Graph`], a per-forward-pass tape; everything is
//! generic over the scalar so the same model code runs in f32 for training
//! and f64 for gradient checks.

mod adam;
mod check;
mod graph;
mod store;

pub use adam::{Adam, AdamState};
pub use check::{finite_diff_check, max_grad_error, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use store::{ParamId, ParameterStore};

use crate::error::{Error, Result};

/// Scalar type the engine is generic over. 32-bit is the training default;
/// 64-bit is required for finite-difference gradient checks.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Copy + Send + Sync + std::fmt::Debug + 'static
{
    const BITS: u32;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const BITS: u32 = 32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!("zero extent in shape {:?}", shape)));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Rank-2 constructor from nested rows (test and glue convenience).
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("ragged rows".to_string()));
        }
        Tensor::from_vec(&[m, n], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn n_rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Width of the last axis.
    pub fn n_cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[F] {
        let n = self.n_cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.n_cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise cast between precisions.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    pub(crate) fn same_shape(&self, other: &Tensor<F>) -> bool {
        self.shape == other.shape
    }
}
