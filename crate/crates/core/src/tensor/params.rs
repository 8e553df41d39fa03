use std::ops::Index;

use rand::Rng;

use super::{Checkpoint, CheckpointEntry, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`Params`] collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named set of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters recorded as leaves on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        self.add(name, Tensor::uniform_weight(fan_in, fan_out, rng))
    }

    pub fn add_bias(&mut self, name: impl Into<String>, width: usize) -> ParamId {
        self.add(name, Tensor::zeros(vec![1, width]))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Records every parameter as a constant; gradients still flow through
    /// the values but stop at these leaves.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| {
                    let mut c = t.clone();
                    c.requires_grad = false;
                    tape.leaf(&c)
                })
                .collect(),
        }
    }

    /// Adds the tape gradients of `bound` into each tensor's `grad` buffer.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_>) {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            let Some(g) = v.grad() else { continue };
            match t.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => t.grad = Some(g),
            }
        }
    }

    /// Flat tape gradients of `bound` in parameter order, zero where a leaf
    /// received none.
    pub fn flat_grads_of(&self, bound: &Bound<'_>) -> Vec<f64> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .flat_map(|(t, v)| v.grad().unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn scale_grads(&mut self, c: f64) {
        for t in &mut self.tensors {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= c);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| match &t.grad {
                Some(g) => g.clone(),
                None => vec![0.0; t.len()],
            })
            .collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "expected {} values, got {}",
                self.num_scalars(),
                values.len()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn to_entries(&self) -> Vec<CheckpointEntry> {
        self.iter()
            .map(|(name, t)| CheckpointEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites values from checkpoint entries; names and shapes must match
    /// this (freshly constructed) layout exactly.
    pub fn load_entries(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let entry = ckpt
                .entry(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if entry.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    entry.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&entry.data);
        }
        Ok(())
    }
}
