use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(op, format!("extents must be positive, got {shape:?}")));
    }
    if numel(shape) != len {
        return Err(Error::shape(
            op,
            format!("shape {shape:?} holds {} values, buffer has {len}", numel(shape)),
        ));
    }
    Ok(())
}

impl DiffTensor {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape("tensor", &shape, values.len())?;
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape);
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Vector of shape `[n]`.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    pub fn tracked(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    /// Untracked tensors ignore the call.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if delta.len() != self.values.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient of {} values for tensor {:?}", delta.len(), self.shape),
            ));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape("reshape", &shape, self.values.len())?;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.values.len());
        }
        self.shape = shape;
        Ok(self)
    }
}
