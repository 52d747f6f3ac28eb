//! Named parameter collections and their binding into a [`Graph`].

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by dotted name (`vit.blocks.0.qkv.w`, `cnn.stem.w`, ...).
///
/// Iteration is in name order, which fixes the checkpoint layout and the
/// order of optimizer updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Validation(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Puts every entry under `prefix` into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, prefix: &str, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.input(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound set of parameters.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("parameter `{name}` is not bound")))
    }

    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }

    /// Adds `scale * grad` of every bound parameter into `into`.
    pub fn accumulate_grads(&self, g: &Graph, into: &mut ParamStore, scale: f64) -> Result<()> {
        for (name, &var) in &self.vars {
            let Some(grad) = g.grad(var) else { continue };
            let dst = into
                .get_mut(name)
                .ok_or_else(|| Error::Validation(format!("no gradient slot for `{name}`")))?;
            for (d, s) in dst.data_mut().iter_mut().zip(grad) {
                *d += scale * s;
            }
        }
        Ok(())
    }
}
