//! Named parameter storage, initialization and the Adam optimizer.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Ordered map of named learnable tensors plus non-learnable buffers
/// (batch-norm running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(
            !self.params.contains_key(&name) && !self.buffers.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.params.insert(name, t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(
            !self.params.contains_key(&name) && !self.buffers.contains_key(&name),
            "duplicate buffer name {name}"
        );
        self.buffers.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Element count of every tensor whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Move every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore<T>) {
        for (k, v) in other.params {
            self.insert(k, v);
        }
        for (k, v) in other.buffers {
            self.insert_buffer(k, v);
        }
    }

    /// Subset whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Register a conv layer `name.weight` (`out×in×k×k`) and `name.bias`,
    /// both uniform in `±1/√fan_in` (the usual framework default).
    pub fn add_conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) {
        let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
        let w = Tensor::from_fn(&[out_c, in_c, k, k], |_| T::from_f64c(rng.random_range(-bound..bound)));
        let b = Tensor::from_fn(&[out_c], |_| T::from_f64c(rng.random_range(-bound..bound)));
        self.insert(format!("{name}.weight"), w);
        self.insert(format!("{name}.bias"), b);
    }

    /// Register a He-normal conv layer with zero bias.
    pub fn add_conv_he(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let w = Tensor::from_fn(&[out_c, in_c, k, k], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64c(z * std)
        });
        self.insert(format!("{name}.weight"), w);
        self.insert(format!("{name}.bias"), Tensor::zeros(&[out_c]));
    }

    pub fn map_all(&mut self, f: impl Fn(&str, &mut Tensor<T>)) {
        for (k, v) in self.params.iter_mut() {
            f(k, v);
        }
    }

    /// Register every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.params.iter().chain(self.buffers.iter()) {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Parameters registered on a tape, addressable by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    /// Collect the gradient of every bound parameter (zeros when unreached).
    pub fn grads<T: Real>(&self, store: &ParamStore<T>, grads: &Gradients<T>) -> IndexMap<String, Tensor<T>> {
        store
            .iter()
            .filter_map(|(k, v)| {
                let var = self.vars.get(k)?;
                Some((
                    k.clone(),
                    grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())),
                ))
            })
            .collect()
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment state keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    t: HashMap<String, u64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("gradient for unknown parameter {name}")))?;
            p.expect_same_shape(g)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - beta1.powi(*t as i32);
            let bc2 = 1.0 - beta2.powi(*t as i32);
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gv = gv.as_f64();
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let update = lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                *pv = T::from_f64c(pv.as_f64() - update);
            }
        }
        Ok(())
    }
}
