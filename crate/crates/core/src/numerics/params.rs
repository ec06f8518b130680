use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters with per-parameter trainable flags. Names are
/// dot-separated paths; iteration order is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
}

/// Graph handles for a bound [`ParameterSet`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, Parameter { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn count(&self) -> u64 {
        self.params.values().map(|p| p.tensor.numel() as u64).sum()
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = pred(name);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Parameters whose name starts with any of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParameterSet {
        ParameterSet {
            params: self
                .params
                .iter()
                .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|n, _| !n.starts_with(prefix));
    }

    /// Adds every parameter of `other`; names must not collide.
    pub fn merge(&mut self, other: ParameterSet) -> Result<()> {
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
            }
            self.params.insert(name, p);
        }
        Ok(())
    }

    /// Records every parameter as a named leaf. Trainable parameters require
    /// gradients unless `track` is false.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(n, p)| (n.clone(), g.leaf(n.clone(), p.tensor.clone(), track && p.trainable)))
            .collect();
        Bindings { vars }
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// parameters, in name order.
    pub fn checksum(&self, select: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, _)| select(n)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParameterSet::new();
        ps.insert("a.w", Tensor::zeros(vec![2]), true).unwrap();
        assert!(ps.insert("a.w", Tensor::zeros(vec![2]), true).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut ps = ParameterSet::new();
        ps.insert("a", Tensor::zeros(vec![2]), true).unwrap();
        ps.insert("b", Tensor::zeros(vec![2]), true).unwrap();
        let before = ps.checksum(|n| n == "a");
        ps.get_mut("b").unwrap().data_mut()[0] = 1.0;
        assert_eq!(before, ps.checksum(|n| n == "a"));
        ps.get_mut("a").unwrap().data_mut()[0] = 1.0;
        assert_ne!(before, ps.checksum(|n| n == "a"));
    }
}
