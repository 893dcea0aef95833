//! Named parameter collections.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Ordered `name → tensor` map. Order is insertion order and is part of
/// the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Copy without the parameters whose name starts with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| !n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    /// Registers every tensor on `g` as a differentiable leaf (or a
    /// constant when `g` has gradients disabled).
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Like [`bind`](Self::bind), but names rejected by `trainable` become
    /// constants.
    pub fn bind_trainable(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| {
                    let v = if trainable(n) {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    };
                    (n.clone(), v)
                })
                .collect(),
        }
    }
}

/// The graph handles of a bound [`ModelParams`].
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        ParamVars {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("nonzero dims")
}

/// Unit-variance uniform init for embedding tables.
pub(crate) fn embedding(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let a = 3f64.sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("nonzero dims")
}
