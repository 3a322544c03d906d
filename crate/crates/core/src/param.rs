//! Named parameter storage shared by every module.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// How a stored tensor participates in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Receives no gradient and is never updated by the optimizer.
    Frozen,
    /// Non-gradient state updated outside the optimizer (batch-norm running stats).
    Buffer,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Trainable => "trainable",
            ParamKind::Frozen => "frozen",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trainable" | "false" => Ok(ParamKind::Trainable),
            "frozen" | "true" => Ok(ParamKind::Frozen),
            "buffer" => Ok(ParamKind::Buffer),
            other => Err(Error::Format(format!("unknown param kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
}

impl Param {
    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Trainable
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.dims());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad, kind });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.params[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces a value; the new tensor must keep the stored dims.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "{}: expected dims {:?}, got {:?}",
                p.name,
                p.value.dims(),
                value.dims()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set_kind(&mut self, id: ParamId, kind: ParamKind) {
        let p = &mut self.params[id.0];
        p.kind = kind;
        if kind != ParamKind::Trainable {
            p.grad = Tensor::zeros(p.value.dims());
        }
    }

    /// Adds `grad` into a trainable parameter's accumulator; other kinds ignore it.
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        let p = &mut self.params[id.0];
        if p.kind == ParamKind::Trainable {
            p.grad.add_assign(grad);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn count(&self, kind: ParamKind) -> usize {
        self.params.iter().filter(|p| p.kind == kind).map(|p| p.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count(ParamKind::Trainable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_ignore_accumulation() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[2], 1.0), ParamKind::Frozen);
        let v = store.add("v", Tensor::full(&[2], 1.0), ParamKind::Trainable);
        let g = Tensor::full(&[2], 3.0);
        store.accumulate(w, &g);
        store.accumulate(v, &g);
        assert_eq!(store.grad(w).data(), &[0.0, 0.0]);
        assert_eq!(store.grad(v).data(), &[3.0, 3.0]);
        assert_eq!(store.trainable_count(), 2);
        assert_eq!(store.find("v"), Some(v));
    }

    #[test]
    fn set_value_checks_dims() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2, 2]), ParamKind::Trainable);
        assert!(store.set_value(w, Tensor::zeros(&[4])).is_err());
        assert!(store.set_value(w, Tensor::full(&[2, 2], 1.0)).is_ok());
    }
}
