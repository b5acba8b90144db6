//! Named parameter storage, graph binding, common layers and the optimizer.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.values.iter_mut()
    }

    pub fn value_at(&self, i: usize) -> &Array2<f64> {
        &self.values[i]
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Sets every parameter to zero (used by tests of residual identities).
    pub fn zero_matching(&mut self, prefix: &str) {
        for (n, v) in self.names.iter().zip(self.values.iter_mut()) {
            if n.starts_with(prefix) {
                v.fill(0.0);
            }
        }
    }
}

/// Glorot-uniform initialised `rows x cols` matrix.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// Lazily lifts parameters onto a graph, remembering which leaf each one got.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    /// `trainable == false` binds parameters as constants (no gradient work).
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self { store, vars: vec![None; store.len()], trainable }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(v) = self.vars[i] {
            return v;
        }
        let value = self.store.value_at(i).clone();
        let v = if self.trainable { g.param(value) } else { g.constant(value) };
        self.vars[i] = Some(v);
        v
    }

    /// Per-parameter gradients in store order; unused parameters get zeros.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Array2<f64>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Array2::zeros(self.store.value_at(i).dim()))
            })
            .collect()
    }
}

/// `x W + b`.
pub fn linear(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str) -> Var {
    let w = b.get(g, &format!("{prefix}.w"));
    let bias = b.get(g, &format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_broadcast(y, bias)
}

pub fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), glorot(rng, fan_in, fan_out));
    store.insert(format!("{prefix}.b"), Array2::zeros((1, fan_out)));
}

pub const LN_EPS: f64 = 1e-5;

pub fn layer_norm(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str) -> Var {
    let gamma = b.get(g, &format!("{prefix}.g"));
    let beta = b.get(g, &format!("{prefix}.b"));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.g"), Array2::ones((1, width)));
    store.insert(format!("{prefix}.b"), Array2::zeros((1, width)));
}

/// Multi-head attention with input and output projections.
pub fn mha(
    g: &mut Graph,
    b: &mut Binder,
    query: Var,
    memory: Var,
    heads: usize,
    mask: Option<Rc<Array2<bool>>>,
    prefix: &str,
) -> Var {
    let q = linear(g, b, query, &format!("{prefix}.q"));
    let k = linear(g, b, memory, &format!("{prefix}.k"));
    let v = linear(g, b, memory, &format!("{prefix}.v"));
    let o = g.attention(q, k, v, heads, mask);
    linear(g, b, o, &format!("{prefix}.o"))
}

pub fn init_mha(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{prefix}.{part}"), d, d);
    }
}

/// Two-layer ReLU feed-forward network.
pub fn ffn(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str) -> Var {
    let h = linear(g, b, x, &format!("{prefix}.l1"));
    let h = g.relu(h);
    linear(g, b, h, &format!("{prefix}.l2"))
}

pub fn init_ffn(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, hidden: usize) {
    init_linear(store, rng, &format!("{prefix}.l1"), d, hidden);
    init_linear(store, rng, &format!("{prefix}.l2"), hidden, d);
}

/// Adam with decoupled weight decay, global-norm clipping and a
/// warmup-then-cosine learning-rate schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub min_lr_frac: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            warmup_steps: 0,
            min_lr_frac: 0.05,
        }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: usize,
    total_steps: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, total_steps: usize) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, v)| Array2::zeros(v.dim())).collect();
        Self { config, m: zeros.clone(), v: zeros, step: 0, total_steps: total_steps.max(1) }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used for the next step.
    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        let t = self.step;
        if t < c.warmup_steps {
            return c.lr * (t + 1) as f64 / c.warmup_steps as f64;
        }
        let span = (self.total_steps.saturating_sub(c.warmup_steps)).max(1) as f64;
        let progress = ((t - c.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        c.lr * (c.min_lr_frac + (1.0 - c.min_lr_frac) * cosine)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [Array2<f64>]) {
        let c = self.config.clone();
        if c.clip_norm > 0.0 {
            let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            if norm > c.clip_norm {
                let s = c.clip_norm / norm;
                grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in store.values_mut().zip(grads.iter()).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (update + c.weight_decay * *p);
            });
        }
    }
}
