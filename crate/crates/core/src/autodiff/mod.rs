//! Small reverse-mode automatic differentiation engine used by the model.

mod graph;
mod tensor;

pub use graph::{Grads, Graph, Var, SI_SDR_CLAMP_DB};
pub(crate) use graph::si_sdr_raw;
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    /// Register a tensor and return its slot.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut R) -> usize {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        self.add(name, Tensor::new(shape, data))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) -> usize {
        self.add(name, Tensor::full(shape, T::of(value)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor<T> {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.tensors[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 5.0 }
    }
}

/// Adam optimizer state. Moments are kept in f64 regardless of the
/// parameter precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let m: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self { config, step: 0, v: m.clone(), m }
    }

    /// Apply one update from per-slot gradients. Returns the gradient norm
    /// before clipping.
    pub fn update<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &[Vec<f64>]) -> f64 {
        assert_eq!(grads.len(), params.len());
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let c = &self.config;
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (slot, g) in grads.iter().enumerate() {
            let p = &mut params.tensors[slot].data;
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..g.len() {
                let gi = g[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let upd = c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p[i] = T::of(p[i].as_f64() - upd);
            }
        }
        norm
    }
}

/// Accumulate the parameter gradients of one graph into `acc` (f64, one
/// vector per slot), scaled by `weight`.
pub fn accumulate_grads<T: Scalar>(graph: &Graph<T>, grads: &Grads<T>, acc: &mut [Vec<f64>], weight: f64) {
    for (slot, g) in graph.param_grads(grads) {
        for (a, v) in acc[slot].iter_mut().zip(g) {
            *a += weight * v.as_f64();
        }
    }
}

/// Zeroed gradient accumulator shaped like `params`.
pub fn zero_grads<T: Scalar>(params: &ParamStore<T>) -> Vec<Vec<f64>> {
    params.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
}
