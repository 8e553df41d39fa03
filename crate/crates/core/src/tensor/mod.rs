//! Dense float64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is a plain owned buffer; it carries no graph. Computation is
//! recorded on a [`Tape`] through [`Var`] handles, one tape per forward pass.
//! Calling [`Var::backward`] on a scalar fills gradients for every leaf that
//! was created with `requires_grad`, and [`Params`] moves those gradients back
//! into the owned parameter tensors for the optimizer.
//!
//! Broadcasting is deliberately narrow: binary ops accept equal shapes or a
//! single-element operand. Row-wise bias adds go through
//! [`Var::broadcast_rows`] explicitly.

mod checkpoint;
pub mod gradcheck;
pub mod nn;
mod optim;
mod params;
mod tape;

pub use checkpoint::{Checkpoint, CheckpointEntry};
pub use optim::{adam_step, Adam, AdamConfig};
pub use params::{Bound, ParamId, Params};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements but buffer has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) initialisation for a
    /// `fan_in x fan_out` weight matrix.
    pub fn uniform_weight(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Tensor {
            shape: vec![fan_in, fan_out],
            data,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
