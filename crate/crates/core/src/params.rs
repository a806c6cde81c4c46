//! Named table of trainable tensors and its binding into a [`Graph`].

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Ordered map from parameter name to tensor. Iteration order is insertion
/// order and is stable across runs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    /// Zero-initialized parameter.
    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape.to_vec()))
    }

    /// Parameter drawn uniformly from `±1/√fan_in`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(-bound..bound)));
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Element count of every parameter whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Insert every parameter into `graph`; gradient-tracking when
    /// `trainable`.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    graph.param(v.clone())
                } else {
                    graph.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }

    /// First parameter holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k.as_str())
    }

    /// Human-readable per-group parameter counts.
    pub fn count_report(&self) -> String {
        let mut groups: IndexMap<&str, usize> = IndexMap::new();
        for (k, v) in &self.entries {
            let group = k.split('.').next().unwrap_or(k);
            *groups.entry(group).or_default() += v.numel();
        }
        let mut out = String::new();
        for (g, n) in &groups {
            out.push_str(&format!("{g:<8} {n:>8}\n"));
        }
        out.push_str(&format!("{:<8} {:>8}\n", "total", self.total_count()));
        out
    }
}

/// Graph handles of bound parameters.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
