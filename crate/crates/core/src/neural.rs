//! Dense encoder with linear log-hazard and gating heads, exact backpropagation
//! and Adam.
//!
//! The encoder maps `R^d -> R^h` through ReLU layers (no layers means the
//! identity). Two linear heads map the representation to `K` log-hazards and
//! `K` gating logits.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
        }
    }

    fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `y = x W + b` with `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weights: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// `[d, h1, ..., h]`; a single entry means the identity encoder.
    pub layer_dims: Vec<usize>,
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("layer_dims is never empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hazard: DenseLayer,
    pub gating: DenseLayer,
}

impl HeadParams {
    pub fn k(&self) -> usize {
        self.hazard.bias.len()
    }
}

/// Activations saved by [`forward`] for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Array2<f64>>,
}

pub fn forward(params: &MlpParams, x: &Array2<f64>) -> Result<(Array2<f64>, EncoderCache)> {
    if x.ncols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            found: x.ncols(),
        });
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut h = x.clone();
    for layer in &params.layers {
        let z = layer.forward(&h);
        inputs.push(h);
        h = z.mapv(|v| params.activation.apply(v));
        pre.push(z);
    }
    Ok((h, EncoderCache { inputs, pre }))
}

/// Log-hazards and gating logits, both `N x K`.
pub fn heads_forward(heads: &HeadParams, rep: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    (heads.hazard.forward(rep), heads.gating.forward(rep))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Everything computed by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub cache: EncoderCache,
    pub representation: Array2<f64>,
    pub log_hazards: Array2<f64>,
    pub gating_logits: Array2<f64>,
}

/// Gradients with the same layout as [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<DenseLayer>,
    pub heads: HeadParams,
}

impl Gradients {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.encoder.iter().chain([&self.heads.hazard, &self.heads.gating]) {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }
}

/// Encoder plus heads: the full set of trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub encoder: MlpParams,
    pub heads: HeadParams,
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_params(layer_dims: &[usize], k: usize, seed: u64) -> Result<Network> {
    if layer_dims.is_empty() || layer_dims.contains(&0) || k == 0 {
        return Err(Error::invalid(format!(
            "layer dimensions {layer_dims:?} and K = {k} must be positive"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_dims
        .windows(2)
        .map(|w| DenseLayer::glorot(w[0], w[1], &mut rng))
        .collect();
    let h = *layer_dims.last().unwrap();
    let hazard = DenseLayer::glorot(h, k, &mut rng);
    let gating = DenseLayer::glorot(h, k, &mut rng);
    Ok(Network {
        encoder: MlpParams {
            layer_dims: layer_dims.to_vec(),
            layers,
            activation: Activation::Relu,
        },
        heads: HeadParams { hazard, gating },
    })
}

impl Network {
    pub fn k(&self) -> usize {
        self.heads.k()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<ForwardPass> {
        let (representation, cache) = forward(&self.encoder, x)?;
        let (log_hazards, gating_logits) = heads_forward(&self.heads, &representation);
        Ok(ForwardPass {
            cache,
            representation,
            log_hazards,
            gating_logits,
        })
    }

    /// Chain rule from upstream gradients wrt log-hazards and gating logits to every parameter.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_log_hazards: &Array2<f64>,
        d_gating: &Array2<f64>,
    ) -> Result<Gradients> {
        let shape = pass.log_hazards.dim();
        for d in [d_log_hazards, d_gating] {
            if d.dim() != shape {
                return Err(Error::DimensionMismatch {
                    expected: shape.0 * shape.1,
                    found: d.len(),
                });
            }
        }
        let rep = &pass.representation;
        let head_grad = |d: &Array2<f64>| DenseLayer {
            weights: rep.t().dot(d),
            bias: d.sum_axis(Axis(0)),
        };
        let heads = HeadParams {
            hazard: head_grad(d_log_hazards),
            gating: head_grad(d_gating),
        };
        let mut upstream =
            d_log_hazards.dot(&self.heads.hazard.weights.t()) + d_gating.dot(&self.heads.gating.weights.t());
        let act = self.encoder.activation;
        let mut encoder = Vec::with_capacity(self.encoder.layers.len());
        for (l, layer) in self.encoder.layers.iter().enumerate().rev() {
            let d_pre = &upstream * &pass.cache.pre[l].mapv(|v| act.grad(v));
            encoder.push(DenseLayer {
                weights: pass.cache.inputs[l].t().dot(&d_pre),
                bias: d_pre.sum_axis(Axis(0)),
            });
            upstream = d_pre.dot(&layer.weights.t());
        }
        encoder.reverse();
        Ok(Gradients { encoder, heads })
    }

    fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.encoder.layers.iter().chain([&self.heads.hazard, &self.heads.gating])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.encoder
            .layers
            .iter_mut()
            .chain([&mut self.heads.hazard, &mut self.heads.gating])
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in a fixed order: each encoder layer (weights row-major, then bias),
    /// then the hazard head, then the gating head.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        let mut it = flat.iter();
        for l in self.layers_mut() {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = *it.next().unwrap());
        }
        Ok(())
    }
}

/// Scales `grads` in place so its Euclidean norm is at most `max_norm`. Returns the original norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// One bias-corrected Adam update. Non-finite gradients abort without touching `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                found: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Applies one Adam step to a network.
pub fn adam_step(net: &mut Network, grads: &[f64], state: &mut AdamState) -> Result<()> {
    let mut flat = net.to_flat();
    state.step(&mut flat, grads)?;
    if flat.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("parameters after Adam update".into()));
    }
    net.set_flat(&flat)
}
