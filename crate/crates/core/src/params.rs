//! Named parameter storage and its binding into a [`Graph`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

/// Every trainable tensor of a model, keyed by a stable dotted name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// `[fan_in × fan_out]` weight and `[fan_out]` bias, both uniform in
    /// `±1/sqrt(fan_in)`.
    pub fn init_linear(&mut self, rng: &mut SeededRng, name: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        let b = (0..fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        self.insert(
            format!("{name}.w"),
            Tensor::new(vec![fan_in, fan_out], w).unwrap(),
        );
        self.insert(format!("{name}.b"), Tensor::vector(b));
    }

    /// Unit gain, zero bias.
    pub fn init_layer_norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.g"), Tensor::filled(vec![dim], 1.0));
        self.insert(format!("{name}.b"), Tensor::zeros(vec![dim]));
    }

    /// Leaves every tensor into `g` as a trainable node.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, true)
    }

    /// Leaves every tensor into `g`, trainable or constant.
    pub fn bind_with(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Same shapes and names as `other`.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Precondition(format!(
                "parameter count {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((ka, ta), (kb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || ta.shape() != tb.shape() {
                return Err(Error::Precondition(format!(
                    "parameter {ka} {:?} vs {kb} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Parameters leafed into one graph.
#[derive(Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Gradient for every bound parameter; zeros where the loss does not
    /// depend on it.
    pub fn collect_grads(&self, g: &Graph, grads: &mut Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, &v) in &self.vars {
            let t = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()));
            out.insert(k.clone(), t);
        }
        out
    }
}
