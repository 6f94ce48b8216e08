//! Named, ordered parameter collections shared by every trainable module.

use std::ops::Index;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, OptimizerState, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph leaves for one [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Replaces values of an existing tensor, keeping its trainability.
    pub fn set_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if self.tensors[i].shape() != shape {
            return Err(Error::shape(format!(
                "parameter {name}: stored shape {:?}, loaded {shape:?}",
                self.tensors[i].shape()
            )));
        }
        let rg = self.tensors[i].requires_grad();
        let mut t = Tensor::new(shape.to_vec(), values)?;
        t.set_requires_grad(rg);
        self.tensors[i] = t;
        Ok(())
    }

    pub fn set_trainable(&mut self, on: bool) {
        for t in &mut self.tensors {
            t.set_requires_grad(on);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.tensors.iter().all(|t| !t.requires_grad())
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t)).collect())
    }

    /// Moves gradients of bound leaves into the tensors' accumulators.
    pub fn collect_grads(&mut self, bound: &Bound, grads: &mut Gradients) -> Result<()> {
        for (t, v) in self.tensors.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.take(*v) {
                t.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn step(&mut self, opt: &mut OptimizerState) -> Result<()> {
        let mut refs: Vec<&mut Tensor> = self.tensors.iter_mut().collect();
        opt.step(&mut refs)
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}
