//! Flat named-tensor storage shared by the detector and the textualizer.
//!
//! Every learnable tensor lives in one contiguous `Vec<f64>`; gradients use
//! the same layout, so the optimizer, the checkpoint writer and the
//! finite-difference harness all work on plain slices.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the flat parameter vector.
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    specs: Vec<TensorSpec>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> TensorId {
        let name = name.into();
        let numel: usize = shape.iter().product();
        assert_eq!(values.len(), numel, "tensor {name}: value count");
        assert!(self.id_of(&name).is_none(), "duplicate tensor {name}");
        let id = TensorId(self.specs.len());
        self.specs.push(TensorSpec {
            name,
            shape: shape.to_vec(),
            offset: self.data.len(),
        });
        self.data.extend(values);
        id
    }

    pub fn get(&self, id: TensorId) -> &[f64] {
        &self.data[self.specs[id.0].range()]
    }

    pub fn get_mut(&mut self, id: TensorId) -> &mut [f64] {
        let r = self.specs[id.0].range();
        &mut self.data[r]
    }

    pub fn spec(&self, id: TensorId) -> &TensorSpec {
        &self.specs[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<TensorId> {
        self.specs.iter().position(|s| s.name == name).map(TensorId)
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(vec![0.0; self.data.len()])
    }

    /// Replaces every value, keeping the layout.
    pub fn set_data(&mut self, data: Vec<f64>) {
        assert_eq!(data.len(), self.data.len(), "set_data length");
        self.data = data;
    }
}

/// Gradient vector laid out like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<f64>);

impl Grads {
    pub fn accumulate(&mut self, store: &ParamStore, id: TensorId, values: &[f64]) {
        let r = store.spec(id).range();
        debug_assert_eq!(r.len(), values.len());
        for (g, v) in self.0[r].iter_mut().zip(values) {
            *g += v;
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            *g *= s;
        }
    }

    pub fn get<'a>(&'a self, store: &ParamStore, id: TensorId) -> &'a [f64] {
        &self.0[store.spec(id).range()]
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * self.weight_decay * params[i];
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

pub fn normal_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect()
}

/// He-normal initialisation for a layer with `fan_in` inputs.
pub fn he_normal<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    normal_vec(rng, n, (2.0 / fan_in as f64).sqrt())
}

/// A `rows × cols` matrix (`rows ≥ cols`) with orthonormal columns, via
/// modified Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    assert!(rows >= cols, "orthogonal init needs rows >= cols");
    let mut m = normal_vec(rng, rows * cols, 1.0);
    for c in 0..cols {
        for p in 0..c {
            let dot: f64 = (0..rows).map(|r| m[r * cols + c] * m[r * cols + p]).sum();
            for r in 0..rows {
                m[r * cols + c] -= dot * m[r * cols + p];
            }
        }
        let norm = (0..rows).map(|r| m[r * cols + c].powi(2)).sum::<f64>().sqrt();
        for r in 0..rows {
            m[r * cols + c] /= norm;
        }
    }
    m.iter_mut().for_each(|v| *v *= gain);
    m
}
