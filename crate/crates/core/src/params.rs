//! Named trainable parameters, graph binding and the Adam optimiser.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces every parameter from `named`; names and shapes must match.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Dimension(format!(
                "checkpoint has {} parameters, model expects {}",
                named.len(),
                self.values.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Dimension(format!("unknown parameter {name}")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    value.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = value.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    /// Puts every parameter on `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Binding {
        Binding {
            vars: self.values.iter().map(|t| graph.param(t.clone())).collect(),
        }
    }

    /// Zero-filled gradient buffers, one per parameter.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect()
    }
}

/// Parameter leaves of one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binding over leaves created elsewhere, in parameter order.
    #[cfg(test)]
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Adds this pass's gradients into `acc`.
    pub fn accumulate(&self, grads: &Gradients, acc: &mut [Tensor]) {
        for (slot, v) in acc.iter_mut().zip(&self.vars) {
            if let Some(g) = grads.get(*v) {
                slot.add_assign(g);
            }
        }
    }
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    if bound == 0.0 {
        return Tensor::zeros(rows, cols);
    }
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Uniform init with bound `1/sqrt(fan_in)`.
pub fn fan_in(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut store.values[i];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, gv) in g.data().iter().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gv;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gv * gv;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p.data_mut()[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
