//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records primitive operations eagerly (values are computed at
//! record time) and [`Graph::backward`] sweeps the recording in reverse to
//! produce gradients for every leaf that asked for them.

mod check;
mod graph;
pub(crate) mod kernels;

pub use check::{grad_check, numeric_gradient};
pub use graph::{Gradients, Graph, OpKind, Tensor};

use crate::error::{Error, Result};

/// An owned n-dimensional array living outside any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if graph::numel(shape) != data.len() {
            return Err(Error::shape("array", &[shape, &[data.len()]]));
        }
        Ok(Array {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![v; graph::numel(shape)],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Copy a recorded value out of a graph.
    pub fn from_graph(g: &Graph, t: Tensor) -> Self {
        Array {
            shape: g.shape(t).to_vec(),
            data: g.value(t).to_vec(),
        }
    }

    pub fn to_constant(&self, g: &mut Graph) -> Tensor {
        g.constant(self.data.clone(), &self.shape)
            .expect("array invariant guarantees a consistent shape")
    }

    pub fn to_param(&self, g: &mut Graph) -> Tensor {
        g.param(self.data.clone(), &self.shape)
            .expect("array invariant guarantees a consistent shape")
    }
}
