//! Named parameter storage, initializers and the Adam(W) optimizer.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autodiff::{Grads, Graph, Var};
use crate::rng::{standard_normal_vec, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Records every tensor on the graph, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), if trainable { g.param(t.clone()) } else { g.constant(t.clone()) }))
            .collect();
        BoundParams { vars }
    }

    /// SHA-256 over names, shapes and little-endian values, in name order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Collect gradients by parameter name (zeros where none flowed).
    pub fn gradients(&self, grads: &mut Grads, store: &ParamStore) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(store.get(k).expect("bound").shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// He-style normal init for a conv weight `[cout, cin, k, k]`.
pub fn conv_weight(rng: &mut SeededRng, cout: usize, cin: usize, k: usize, gain: f64) -> Tensor {
    let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
    let data = standard_normal_vec(rng, cout * cin * k * k).into_iter().map(|v| v * std).collect();
    Tensor::new(vec![cout, cin, k, k], data).expect("conv weight")
}

/// Adam with optional decoupled weight decay (AdamW when `weight_decay > 0`).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, weight_decay: 0.0, step: 0, moments: BTreeMap::new() }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self { weight_decay, ..Self::new(lr, 0.9, 0.999) }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every tensor that has a gradient entry.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.tensors.get_mut(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                if self.weight_decay > 0.0 {
                    *pv -= self.lr * self.weight_decay * *pv;
                }
                *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..500 {
            let x = store.get("x").unwrap().data().to_vec();
            let g = Tensor::new(vec![2], x.iter().map(|v| 2.0 * v).collect()).unwrap();
            opt.step(&mut store, &BTreeMap::from([("x".to_string(), g)]));
        }
        assert!(store.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn hash_tracks_content() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::zeros(&[2, 2]));
        let h1 = a.content_hash();
        assert_eq!(h1, a.clone().content_hash());
        a.insert("w", Tensor::filled(&[2, 2], 1e-300));
        assert_ne!(h1, a.content_hash());
    }
}
