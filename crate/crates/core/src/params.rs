//! Named parameter storage and initialization.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::{CmtaError, Result};
use crate::tensor::{c, Real, Tensor};

/// Flat, ordered list of named learnable tensors. Layers keep indices into it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor<F> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<F> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor<F>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, F>, id: usize) -> Var {
        tape.param(&self.tensors[id], id)
    }

    /// Replaces every tensor, checking names and shapes against `self`.
    pub fn load_from(&mut self, names: &[String], tensors: Vec<Tensor<F>>) -> Result<()> {
        if names != self.names.as_slice() || tensors.len() != self.tensors.len() {
            return Err(CmtaError::config(
                "parameter layout in file does not match the configured model",
            ));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != self.tensors[i].shape() {
                return Err(CmtaError::config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    self.names[i],
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Xavier-uniform bound `√(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Samples a `rows × cols` matrix uniformly on `±xavier_bound(cols, rows)`.
pub fn xavier_uniform<F: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<F> {
    let a = xavier_bound(cols, rows);
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    let data = (0..rows * cols).map(|_| c::<F>(dist.sample(rng))).collect();
    Tensor::new(vec![rows, cols], data).expect("positive extents")
}

pub fn zeros_bias<F: Real>(n: usize) -> Tensor<F> {
    Tensor::zeros(&[n])
}
