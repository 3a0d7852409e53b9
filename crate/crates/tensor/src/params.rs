use std::ops::Index;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Position of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<(String, Tensor)>,
}

/// Graph handles for every parameter of a set, valid for one graph.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a trainable parameter. Names must be unique within the set.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter name {name}");
        self.params.push((name, tensor.with_grad()));
        ParamId(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Enables gradients exactly for parameters whose name satisfies `pred`.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (n, t) in &mut self.params {
            t.set_requires_grad(pred(n));
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|(_, t)| g.leaf(t)).collect())
    }

    /// Adds the graph's gradients into each trainable parameter's buffer.
    pub fn collect_grads(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        if bound.0.len() != self.params.len() {
            return Err(TensorError::Contract(
                "bound handles belong to another set".into(),
            ));
        }
        for ((_, t), &v) in self.params.iter_mut().zip(&bound.0) {
            if !t.requires_grad() {
                continue;
            }
            let Some(gr) = g.grad(v) else { continue };
            let merged = match t.take_grad() {
                Some(mut prev) => {
                    prev.iter_mut().zip(gr).for_each(|(p, q)| *p += q);
                    prev
                }
                None => gr.to_vec(),
            };
            t.set_grad(merged)?;
        }
        Ok(())
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn assign(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter {name}")))?;
        let t = self.get_mut(id);
        if t.numel() != data.len() {
            return Err(TensorError::Contract(format!(
                "parameter {name} holds {} values, got {}",
                t.numel(),
                data.len()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }
}
