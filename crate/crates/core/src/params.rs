//! Named trainable parameters, their initialization, and the optimizer.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered parameter collection. Each parameter owns its own
/// storage; nothing is aliased between entries.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(Arc::new(tensor.with_requires_grad(true)));
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.tensors[id.0])
    }

    /// True when two ids refer to the same underlying buffer.
    pub fn shares_storage(&self, a: ParamId, b: ParamId) -> bool {
        Arc::ptr_eq(&self.tensors[a.0], &self.tensors[b.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces the value of an existing parameter, keeping its dims.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let cur = self.get(id);
        if cur.dims() != tensor.dims() {
            return Err(Error::shape("ParamStore::set", cur.dims(), tensor.dims()));
        }
        self.tensors[id.0] = Arc::new(tensor.with_requires_grad(true));
        Ok(())
    }
}

/// Seeded parameter factory. Values are drawn in `f64` and cast, so the
/// same seed yields the same model in either precision.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Float>(&mut self, dims: &[usize], std: f64) -> Tensor<T> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        Tensor::new(dims.to_vec(), data).expect("valid dims")
    }

    /// Weight scaled to variance `1 / fan_in`.
    pub fn scaled<T: Float>(&mut self, dims: &[usize], fan_in: usize) -> Tensor<T> {
        self.normal(dims, 1.0 / (fan_in as f64).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `grads` is aligned with the store's parameter order.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("Adam::update", &[grads.len()], &[store.len()]));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[idx];
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                p[k] -= step_size * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
