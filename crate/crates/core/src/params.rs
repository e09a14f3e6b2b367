//! Named parameter tensors, initialization and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Mat,
    pub trainable: bool,
}

/// Parameter tensors keyed by module path, e.g. `agg.spatial.queries`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Mat {
        &self.entries[name].value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Freezes everything except the parameters named in `keep`.
    pub fn freeze_all_except(&mut self, keep: &[&str]) {
        for (name, p) in self.entries.iter_mut() {
            p.trainable = keep.contains(&name.as_str());
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    pub fn to_serialized(&self) -> BTreeMap<String, SerializedTensor> {
        self.entries
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    SerializedTensor {
                        shape: [p.value.nrows(), p.value.ncols()],
                        trainable: p.trainable,
                        data: p.value.iter().copied().collect(),
                    },
                )
            })
            .collect()
    }

    pub fn from_serialized(
        map: BTreeMap<String, SerializedTensor>,
    ) -> Result<Self, ndarray::ShapeError> {
        let mut store = Self::new();
        for (k, t) in map {
            let value = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)?;
            store.insert(k, value, t.trainable);
        }
        Ok(store)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SerializedTensor {
    pub shape: [usize; 2],
    pub trainable: bool,
    pub data: Vec<f64>,
}

pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

pub fn zeros(rows: usize, cols: usize) -> Mat {
    Array2::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Mat {
    Array2::ones((rows, cols))
}

pub fn identity(n: usize) -> Mat {
    Array2::eye(n)
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Mat, Mat)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Mat>) {
        self.step += 1;
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .values()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Mat::zeros(grad.dim()), Mat::zeros(grad.dim())));
            if self.lr == 0.0 {
                continue;
            }
            for ((pv, &gv), (mv, vv)) in p
                .value
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = gv * scale;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", array![[1.0, -1.0]], true);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), array![[0.5, -0.5]]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut store, &grads);
        let w = store.value("w");
        assert!(w[[0, 0]] < 1.0 && w[[0, 1]] > -1.0);
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("w", normal(&mut rng, 3, 3, 1.0), true);
        let before = store.clone();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), normal(&mut rng, 3, 3, 1.0));
        let mut opt = Adam::new(0.0);
        opt.step(&mut store, &grads);
        assert_eq!(store, before);
    }

    #[test]
    fn xavier_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = xavier_uniform(&mut rng, 8, 24);
        let limit = (6.0f64 / 32.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn serialization_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert("a.b", normal(&mut rng, 2, 5, 0.3), true);
        store.insert("c", zeros(1, 1), false);
        let back = ParamStore::from_serialized(store.to_serialized()).unwrap();
        assert_eq!(back, store);
    }
}
