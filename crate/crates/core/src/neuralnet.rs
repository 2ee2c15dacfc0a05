//! Fixed-topology feed-forward networks with hand-written reverse mode, and Adam.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussmath::{clamp_log_var, clamp_log_var_grad, DiagGaussian};

/// How the final affine layer's output is post-processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Linear,
    /// Rectifier on the output, used for shared feature trunks.
    Rectified,
    /// First half means, second half clamped log-variances.
    Gaussian,
}

/// One affine map `y = W x + b`, weights stored row-major as `n_out × n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.n_in)) {
            let mut acc = 0.0;
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            *o += acc;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    head: OutputHead,
}

/// Parameter-shaped gradient of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<Layer>,
}

/// Intermediate values retained for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of the final layer.
    last_pre: Vec<f64>,
    output: Vec<f64>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Split a gaussian-head output into a [`DiagGaussian`].
    pub fn gaussian(&self) -> DiagGaussian {
        let half = self.output.len() / 2;
        DiagGaussian::new(self.output[..half].to_vec(), self.output[half..].to_vec())
            .expect("gaussian head output has even length")
    }
}

impl Mlp {
    /// He-initialized network with zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], head: OutputHead, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims, head)?;
        for layer in &mut net.layers {
            let scale = (2.0 / layer.n_in as f64).sqrt();
            for w in &mut layer.weights {
                let e: f64 = StandardNormal.sample(rng);
                *w = scale * e;
            }
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], head: OutputHead) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Self::from_layers(layers, head)
    }

    pub fn from_layers(layers: Vec<Layer>, head: OutputHead) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.n_in * l.n_out || l.bias.len() != l.n_out {
                return Err(Error::Config(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && layers[i - 1].n_out != l.n_in {
                return Err(Error::Config(format!("layer {i} input does not match previous output")));
            }
        }
        if head == OutputHead::Gaussian && !layers.last().unwrap().n_out.is_multiple_of(2) {
            return Err(Error::Config("gaussian head needs an even output dimension".into()));
        }
        Ok(Self { layers, head })
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().n_out
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.n_out));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            layers: self.layers.iter().map(|l| Layer::zeros(l.n_in, l.n_out)).collect(),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.output)
    }

    pub fn forward_gaussian(&self, input: &[f64]) -> Result<DiagGaussian> {
        if self.head != OutputHead::Gaussian {
            return Err(Error::Contract("forward_gaussian on a non-gaussian head".into()));
        }
        Ok(self.forward_cached(input)?.gaussian())
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<MlpTrace> {
        check_dim("mlp_forward", self.input_dim(), input.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = input.to_vec();
        let last = self.layers.len() - 1;
        let mut pre = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&current, &mut pre);
            inputs.push(std::mem::take(&mut current));
            if i < last {
                current = pre.iter().map(|v| v.max(0.0)).collect();
            }
        }
        let output = match self.head {
            OutputHead::Linear => pre.clone(),
            OutputHead::Rectified => pre.iter().map(|v| v.max(0.0)).collect(),
            OutputHead::Gaussian => {
                let half = pre.len() / 2;
                let mut out = pre.clone();
                for v in &mut out[half..] {
                    *v = clamp_log_var(*v);
                }
                out
            }
        };
        Ok(MlpTrace {
            inputs,
            last_pre: pre,
            output,
        })
    }

    /// Backpropagate `upstream = ∂f/∂output` through the network, accumulating
    /// parameter gradients into `grad` when given. Returns `∂f/∂input`.
    pub fn backward(&self, trace: &MlpTrace, upstream: &[f64], mut grad: Option<&mut MlpGrad>) -> Result<Vec<f64>> {
        check_dim("mlp_backward", self.output_dim(), upstream.len())?;
        let mut delta: Vec<f64> = match self.head {
            OutputHead::Linear => upstream.to_vec(),
            OutputHead::Rectified => upstream
                .iter()
                .zip(&trace.last_pre)
                .map(|(u, p)| if *p > 0.0 { *u } else { 0.0 })
                .collect(),
            OutputHead::Gaussian => {
                let half = upstream.len() / 2;
                upstream
                    .iter()
                    .zip(&trace.last_pre)
                    .enumerate()
                    .map(|(i, (u, p))| if i < half { *u } else { u * clamp_log_var_grad(*p) })
                    .collect()
            }
        };
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            if let Some(g) = grad.as_deref_mut() {
                let gl = &mut g.layers[i];
                for (o, d) in delta.iter().enumerate() {
                    gl.bias[o] += d;
                    if *d != 0.0 {
                        let row = &mut gl.weights[o * layer.n_in..(o + 1) * layer.n_in];
                        for (w, x) in row.iter_mut().zip(input) {
                            *w += d * x;
                        }
                    }
                }
            }
            let mut prev = vec![0.0; layer.n_in];
            for (d, row) in delta.iter().zip(layer.weights.chunks_exact(layer.n_in)) {
                if *d != 0.0 {
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
            }
            if i > 0 {
                // input[i] is relu(pre[i-1]); a zero activation means a dead unit.
                for (p, x) in prev.iter_mut().zip(input) {
                    if *x <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Gradients of `⟨upstream, output⟩` with respect to every parameter and the input.
    pub fn gradients(&self, input: &[f64], upstream: &[f64]) -> Result<(MlpGrad, Vec<f64>)> {
        let trace = self.forward_cached(input)?;
        let mut grad = self.zero_grad();
        let dx = self.backward(&trace, upstream, Some(&mut grad))?;
        Ok((grad, dx))
    }

    pub fn blocks<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weights));
            out.push((format!("{prefix}.{i}.bias"), &l.bias));
        }
    }

    pub fn blocks_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &mut l.weights));
            out.push((format!("{prefix}.{i}.bias"), &mut l.bias));
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

impl MlpGrad {
    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            add_into(&mut a.weights, &b.weights);
            add_into(&mut a.bias, &b.bias);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn blocks<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weights));
            out.push((format!("{prefix}.{i}.bias"), &l.bias));
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| *v == 0.0))
    }
}

pub(crate) fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One named parameter block and its descent direction for an optimizer step.
pub struct BlockUpdate<'a> {
    pub name: &'a str,
    pub params: &'a mut [f64],
    pub grads: &'a [f64],
}

/// Adam with bias correction. Moments are keyed by block name and created on
/// first use, so frozen blocks can simply be left out of a step.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Minimizing step: `params -= lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, blocks: &mut [BlockUpdate<'_>]) -> Result<()> {
        for b in blocks.iter() {
            check_dim("adam_step", b.params.len(), b.grads.len())?;
            if b.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    block: b.name.to_string(),
                });
            }
            if let Some((m, _)) = self.moments.get(b.name) {
                check_dim("adam_step moments", m.len(), b.params.len())?;
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for b in blocks.iter_mut() {
            let (m, v) = self
                .moments
                .entry(b.name.to_string())
                .or_insert_with(|| (vec![0.0; b.params.len()], vec![0.0; b.params.len()]));
            for i in 0..b.params.len() {
                let g = b.grads[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                b.params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
