//! Named, ordered parameter storage shared by every model.

use std::ops::Index;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Insertion-ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.position(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.position(name).map(ParamId)
    }

    /// Looks a parameter up by name and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Format(format!("missing tensor record `{name}`")))?;
        let found = self.get(id).shape();
        if found != shape {
            return Err(dim_err(
                "load",
                format!("`{name}` has shape {found:?}, expected {shape:?}"),
            ));
        }
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter on `tape`, differentiable when the tape is.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound {
        Bound(self.entries.iter().map(|(_, t)| tape.param(t)).collect())
    }

    /// Records every parameter as a constant (frozen model).
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|(_, t)| tape.constant_ref(t))
                .collect(),
        )
    }

    /// Gradients aligned with this set; parameters unreached by the loss get zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .zip(&bound.0)
            .map(|((_, t), &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut set = Self::new();
        for (name, t) in entries {
            if set.position(&name).is_some() {
                return Err(Error::Format(format!("duplicate tensor record `{name}`")));
            }
            set.entries.push((name, t));
        }
        Ok(set)
    }
}

/// Tape handles for a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "duplicate")]
    fn names_are_unique() {
        let mut p = ParamSet::<f32>::new();
        p.add("w", Tensor::zeros(&[1]));
        p.add("w", Tensor::zeros(&[1]));
    }

    #[test]
    fn expect_checks_shape() {
        let mut p = ParamSet::<f32>::new();
        p.add("w", Tensor::zeros(&[2, 3]));
        assert!(p.expect("w", &[2, 3]).is_ok());
        assert!(p.expect("w", &[3, 2]).is_err());
        assert!(p.expect("b", &[3]).is_err());
        assert_eq!(p.count(), 6);
    }
}
