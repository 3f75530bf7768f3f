use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::params::{ParamId, ParamStore, TagSet};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 1e-2, momentum: 0.9, weight_decay: 0.0 }
    }
}

/// SGD with heavy-ball momentum, restricted to parameters whose tag is in
/// `allowed`. Everything else is left untouched bit for bit.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    allowed: TagSet,
    velocity: HashMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, allowed: TagSet) -> Self {
        Self { config, allowed, velocity: HashMap::new() }
    }

    pub fn allowed(&self) -> &TagSet {
        &self.allowed
    }

    pub fn is_trainable(&self, store: &ParamStore, id: ParamId) -> bool {
        let tag = store.get(id).tag;
        tag.is_trainable() && self.allowed.contains(&tag)
    }

    /// Applies the gradients recorded in `graph`.
    pub fn step(&mut self, store: &mut ParamStore, graph: &Graph) {
        let SgdConfig { lr, momentum, weight_decay } = self.config;
        for (id, grad) in graph.param_grads() {
            if !self.is_trainable(store, id) {
                continue;
            }
            let value = store.value_mut(id);
            let vel = self.velocity.entry(id).or_insert_with(|| Tensor::zeros(value.shape()));
            for ((v, g), w) in vel.data_mut().iter_mut().zip(grad.data()).zip(value.data_mut().iter_mut()) {
                let d = g + weight_decay * *w;
                *v = momentum * *v + d;
                *w -= lr * *v;
            }
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}
