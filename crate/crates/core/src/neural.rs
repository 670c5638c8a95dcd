//! The line-switching network: a perceptron with two ELU hidden layers and
//! a sharpened sigmoid head, `z = sigmoid(eta * (W h + b))`, plus AdamW.
//!
//! Inputs are standardized with per-bus statistics stored in the parameters
//! (buses with zero spread pass through centered but unscaled).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Head bias under the feasibility-preserving initialization is
/// `HEAD_LOGIT / eta`, so every output starts at `sigmoid(HEAD_LOGIT)`.
pub const HEAD_LOGIT: f64 = 9.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cache was produced by a different parameter version")]
    StaleCache,
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// One affine layer, weights stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            biases: vec![0.0; n_out],
        }
    }

    fn uniform<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let r = 1.0 / (n_in as f64).sqrt();
        Self {
            n_in,
            n_out,
            weights: (0..n_in * n_out).map(|_| rng.gen_range(-r..r)).collect(),
            biases: (0..n_out).map(|_| rng.gen_range(-r..r)).collect(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| {
                let row = &self.weights[o * self.n_in..(o + 1) * self.n_in];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[o]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_dims: Vec<usize>,
    pub layers: Vec<Layer>,
    pub eta: f64,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    /// Bumped on every update so caches from older parameters are caught.
    #[serde(skip)]
    version: u64,
}

impl MlpParams {
    pub fn n_in(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_out(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Sets the input standardization. Zero spreads are stored as 1.
    pub fn set_normalization(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<(), NeuralError> {
        if mean.len() != self.n_in() || std.len() != self.n_in() {
            return Err(NeuralError::DimensionMismatch("normalization length".into()));
        }
        self.input_mean = mean;
        self.input_std = std.into_iter().map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        self.version += 1;
        Ok(())
    }

    /// Flattened parameters in layer order, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        if flat.len() != self.n_params() {
            return Err(NeuralError::DimensionMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.biases.iter_mut()).for_each(|p| *p = it.next().unwrap());
        }
        self.version += 1;
        Ok(())
    }

    fn validate(&self) -> Result<(), NeuralError> {
        if !(self.eta >= 1.0) {
            return Err(NeuralError::Invalid(format!("eta = {} must be at least 1", self.eta)));
        }
        if self.layers.len() + 1 != self.layer_dims.len() {
            return Err(NeuralError::Invalid("layer count does not match dims".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.n_in != self.layer_dims[i]
                || l.n_out != self.layer_dims[i + 1]
                || l.weights.len() != l.n_in * l.n_out
                || l.biases.len() != l.n_out
            {
                return Err(NeuralError::Invalid(format!("layer {i} shape")));
            }
        }
        if self.input_mean.len() != self.n_in() || self.input_std.len() != self.n_in() {
            return Err(NeuralError::Invalid("normalization length".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("parameters serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, NeuralError> {
        let p: Self = serde_json::from_str(text).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// Initializes `[n_in, n_h, n_h, n_out]` parameters. Hidden layers use
/// uniform fan-in initialization. With `custom_head`, the last layer has
/// zero weights and bias `9 / eta`; otherwise it is initialized like the
/// hidden layers.
pub fn init_params(seed: u64, dims: &[usize], eta: f64, custom_head: bool) -> Result<MlpParams, NeuralError> {
    if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
        return Err(NeuralError::Invalid(format!("layer dims {dims:?}")));
    }
    if !(eta >= 1.0) {
        return Err(NeuralError::Invalid(format!("eta = {eta} must be at least 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = dims.len() - 2;
    let layers = (0..dims.len() - 1)
        .map(|i| {
            if i == last && custom_head {
                let mut l = Layer::zeros(dims[i], dims[i + 1]);
                l.biases.fill(HEAD_LOGIT / eta);
                l
            } else {
                Layer::uniform(dims[i], dims[i + 1], &mut rng)
            }
        })
        .collect();
    Ok(MlpParams {
        layer_dims: dims.to_vec(),
        layers,
        eta,
        input_mean: vec![0.0; dims[0]],
        input_std: vec![1.0; dims[0]],
        version: 0,
    })
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Activations kept by [`mlp_forward`] for [`backprop`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (the standardized demand first).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
    version: u64,
}

pub fn mlp_forward(params: &MlpParams, demand: &[f64]) -> Result<(Vec<f64>, ForwardCache), NeuralError> {
    if demand.len() != params.n_in() {
        return Err(NeuralError::DimensionMismatch(format!(
            "input has length {}, network expects {}",
            demand.len(),
            params.n_in()
        )));
    }
    let mut x: Vec<f64> = demand
        .iter()
        .zip(&params.input_mean)
        .zip(&params.input_std)
        .map(|((d, m), s)| (d - m) / s)
        .collect();
    let n_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    for (i, layer) in params.layers.iter().enumerate() {
        let a = layer.apply(&x);
        inputs.push(x);
        x = if i + 1 == n_layers {
            a.iter().map(|&v| sigmoid(params.eta * v)).collect()
        } else {
            a.iter().map(|&v| elu(v)).collect()
        };
        pre.push(a);
    }
    let cache = ForwardCache {
        inputs,
        pre,
        output: x.clone(),
        version: params.version,
    };
    Ok((x, cache))
}

/// Gradients shaped like the parameter layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params.layers.iter().map(|l| Layer::zeros(l.n_in, l.n_out)).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += scale * y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += scale * y);
        }
    }
}

/// Reverse-mode gradients of a scalar loss given `dloss/dz`.
pub fn backprop(params: &MlpParams, cache: &ForwardCache, dloss_dz: &[f64]) -> Result<Gradients, NeuralError> {
    if cache.version != params.version {
        return Err(NeuralError::StaleCache);
    }
    if dloss_dz.len() != params.n_out() {
        return Err(NeuralError::DimensionMismatch("upstream gradient length".into()));
    }
    let mut grads = Gradients::zeros_like(params);
    let n_layers = params.layers.len();
    // delta = dloss / d(pre-activation) of the current layer.
    let mut delta: Vec<f64> = cache
        .output
        .iter()
        .zip(dloss_dz)
        .map(|(z, g)| g * params.eta * z * (1.0 - z))
        .collect();
    for i in (0..n_layers).rev() {
        let layer = &params.layers[i];
        let input = &cache.inputs[i];
        let g = &mut grads.layers[i];
        for o in 0..layer.n_out {
            g.biases[o] = delta[o];
            let row = &mut g.weights[o * layer.n_in..(o + 1) * layer.n_in];
            row.iter_mut().zip(input).for_each(|(w, x)| *w = delta[o] * x);
        }
        if i == 0 {
            break;
        }
        let below = &cache.pre[i - 1];
        delta = (0..layer.n_in)
            .map(|j| {
                let s: f64 = (0..layer.n_out).map(|o| layer.weights[o * layer.n_in + j] * delta[o]).sum();
                s * elu_grad(below[j])
            })
            .collect();
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(params: &mut MlpParams, grads: &Gradients, state: &mut AdamWState) -> Result<(), NeuralError> {
    let g = grads.flatten();
    if g.len() != params.n_params() || state.m.len() != g.len() {
        return Err(NeuralError::DimensionMismatch("gradient and optimizer state sizes".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut p = params.flatten();
    for i in 0..p.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g[i] * g[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        p[i] -= state.lr * state.weight_decay * p[i];
        p[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    params.unflatten(&p)
}
