use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::Rng;

/// A named learnable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    name: String,
    shape: Vec<usize>,
    pub values: Vec<f32>,
    pub grad: Vec<f32>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Result<Self> {
        let name = name.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "tensor `{name}` needs a nonempty shape of positive dims, got {shape:?}"
            )));
        }
        let len = shape.iter().product();
        Ok(Self {
            name,
            shape: shape.to_vec(),
            values: vec![0.0; len],
            grad: vec![0.0; len],
        })
    }

    pub fn from_values(name: impl Into<String>, shape: &[usize], values: Vec<f32>) -> Result<Self> {
        let mut t = Self::zeros(name, shape)?;
        if values.len() != t.values.len() {
            return Err(Error::DimensionMismatch(format!(
                "tensor `{}` of shape {:?} given {} values",
                t.name,
                shape,
                values.len()
            )));
        }
        t.values = values;
        Ok(t)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Shape viewed as a matrix: rank-1 tensors are a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            dims => (dims[0], dims[1..].iter().product()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// SHA-256 of the little-endian value bytes, for freeze checks.
    pub fn value_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tensor: ParamTensor) -> Result<ParamId> {
        if self.by_name.contains_key(tensor.name()) {
            return Err(Error::InvalidParameter(format!(
                "duplicate parameter name `{}`",
                tensor.name()
            )));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(tensor.name().to_string(), id);
        self.tensors.push(tensor);
        Ok(id)
    }

    /// Adds a tensor drawn from a ±2σ truncated Gaussian.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> Result<ParamId> {
        let mut t = ParamTensor::zeros(name, shape)?;
        for v in t.values.iter_mut() {
            *v = rng.truncated_normal(std) as f32;
        }
        self.insert(t)
    }

    pub fn insert_filled(&mut self, name: &str, shape: &[usize], value: f32) -> Result<ParamId> {
        let mut t = ParamTensor::zeros(name, shape)?;
        t.values.iter_mut().for_each(|v| *v = value);
        self.insert(t)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(ParamTensor::zero_grad);
    }
}
