use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{CrurError, Result};
use crate::tensor::Tensor;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| CrurError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| CrurError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
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

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn map_values(&self, f: impl Fn(&Tensor) -> Tensor) -> Params {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), f(v)))
                .collect(),
        }
    }

    /// Same names and shapes with fresh uniform(-scale, scale) values.
    pub fn resampled<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Params {
        let mut out = Params::new();
        for (k, v) in self.iter() {
            out.insert(k, Tensor::uniform(v.shape(), scale, rng));
        }
        out
    }

    /// Places every tensor on the graph as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        self.bind_with(g, true)
    }

    /// Places every tensor on the graph; `trainable = false` makes them
    /// constants so no gradient bookkeeping happens.
    pub fn bind_with(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.leaf(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }

    /// Checks that `expected` names exist with the given shapes and nothing
    /// else is present.
    pub fn check_shapes(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(CrurError::dim("parameter shape", t.shape(), shape));
            }
        }
        if self.entries.len() != expected.len() {
            let known: std::collections::HashSet<&str> =
                expected.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&str> = self.names().filter(|n| !known.contains(n)).collect();
            return Err(CrurError::Schema(format!(
                "unexpected parameters: {extra:?}"
            )));
        }
        Ok(())
    }
}

/// Graph handles for a bound [`Params`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CrurError::MissingParam(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradient of every parameter; zeros where the loss did not reach.
    pub fn gradients(&self, params: &Params, grads: &Gradients) -> Params {
        let mut out = Params::new();
        for (name, t) in params.iter() {
            let g = self
                .vars
                .get(name)
                .and_then(|&v| grads.get(v))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name, g);
        }
        out
    }
}
