//! A small reverse-mode differentiation engine with exactly the layers the
//! CNN-GRU needs.
//!
//! Forward kernels in [`layers`] are plain functions over slices; [`graph`]
//! records them on a tape and replays the tape backwards. Everything is
//! `f64`.

pub mod adam;
pub mod graph;
pub mod layers;

pub use adam::{adam_step, AdamState};
pub use graph::{Graph, Var};
pub use layers::{conv2d_forward, dropout, gru_step, relu, softmax, softmax_xent, Conv2dLayer, GruCell};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("drop probability must lie in [0, 1), got {0}")]
    InvalidProbability(f64),
    #[error("backward already ran on this graph; record a new forward pass")]
    GraphConsumed,
    #[error("loss node must be a scalar, got {0} elements")]
    NonScalarLoss(usize),
}

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        Ok(Tensor { values, shape })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            values: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Uniform Glorot initialization with limit `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        Tensor {
            values: (0..n).map(|_| rng.random_range(-limit..=limit)).collect(),
            shape: shape.to_vec(),
        }
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeroed(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
