//! Dense tensors with reverse-mode differentiation.
//!
//! `Tensor` is a plain row-major value; all differentiable computation is
//! recorded on a [`Graph`], whose nodes are addressed by [`NodeId`]. A forward
//! pass appends nodes in topological order; `Graph::backward` walks them in
//! reverse exactly once, accumulating gradients into every node whose
//! `requires_grad` flag is set.

mod graph;
mod gradcheck;
pub mod checkpoint;

pub use gradcheck::{
    grad_check, grad_check_sampled, GradCheckReport, DEFAULT_EPS, DEFAULT_TOL,
};
pub use graph::{Graph, NodeId, Padding, PoolMode};

use crate::error::{CoreError, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense N-dimensional array, row-major, 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(CoreError::dim(format!("zero extent in shape {:?}", shape)));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.iter().product())
            .map(|_| normal.sample(rng))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform values in [lo, hi).
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.iter().product())
            .map(|_| rng.gen_range(lo..hi))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }
}
