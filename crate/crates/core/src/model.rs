//! The learned distributions and the closed-form discrete posteriors.
//!
//! * `q(z|x)`: [`ModelState::encoder`], a gaussian-head network over trajectories.
//! * `p(x|z)`: [`ModelState::decoder`], mean of an identity-covariance Gaussian in meters.
//! * `p(y|s)`: [`ModelState::classifier`], softmax over `K` actions.
//! * `p(z|y)`: [`LatentMixture`], a linear map from one-of-K codes.
//! * `q(z|y,s)`: [`DualEncoder`], a shared trunk with `K` gaussian heads (or `K`
//!   disjoint networks).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_index, Error, Result};
use crate::gaussmath::{cross_entropy, kl_diag, DiagGaussian, LatentPoint};
use crate::neuralnet::{add_into, Mlp, MlpGrad, OutputHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Flattened trajectory length, `2T`.
    pub traj_dim: usize,
    pub scenario_dim: usize,
    pub latent_dim: usize,
    pub num_actions: usize,
    /// Hidden widths shared by the encoder, decoder, classifier and dual trunk.
    pub hidden: Vec<usize>,
    /// Hidden widths inside each dual head (empty: one affine layer).
    #[serde(default)]
    pub dual_head_hidden: Vec<usize>,
    /// Dual heads read a shared scenario trunk; otherwise each head is a
    /// full network over the scenario.
    #[serde(default = "default_true")]
    pub shared_dual_trunk: bool,
    /// `p(y|s)` reads the dual trunk's features instead of its own network.
    #[serde(default)]
    pub classifier_on_trunk: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.traj_dim == 0 || !self.traj_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "trajectory dimension {} must be even and positive",
                self.traj_dim
            )));
        }
        if self.scenario_dim == 0 || self.latent_dim == 0 || self.num_actions == 0 {
            return Err(Error::Config(
                "scenario, latent and action counts must be positive".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "hidden widths must be a non-empty list of positive sizes".into(),
            ));
        }
        if self.classifier_on_trunk && !self.shared_dual_trunk {
            return Err(Error::Config("classifier_on_trunk requires shared_dual_trunk".into()));
        }
        Ok(())
    }

    fn trunk_width(&self) -> usize {
        *self.hidden.last().unwrap()
    }
}

/// Per-coordinate affine standardization, `normalized = (raw - shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and standard deviations, with scales floored at `min_scale`.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize, min_scale: f64) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1;
            for d in 0..dim {
                sum[d] += r[d];
                sq[d] += r[d] * r[d];
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let nf = n as f64;
        let shift: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sq
            .iter()
            .zip(&shift)
            .map(|(s, m)| (s / nf - m * m).max(0.0).sqrt().max(min_scale))
            .collect();
        Self { shift, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn denormalize(&self, normalized: &[f64]) -> Vec<f64> {
        normalized
            .iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(y, (m, s))| m + s * y)
            .collect()
    }
}

/// `K` diagonal Gaussians over the latent space, stored as the `2D × K`
/// matrix of a linear map from one-of-K codes to `(mean, log_var)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMixture {
    num_actions: usize,
    latent_dim: usize,
    weights: Vec<f64>,
}

impl LatentMixture {
    pub fn new(num_actions: usize, latent_dim: usize) -> Self {
        Self {
            num_actions,
            latent_dim,
            weights: vec![0.0; 2 * latent_dim * num_actions],
        }
    }

    pub fn from_components(components: &[DiagGaussian]) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Contract("mixture needs at least one component".into()))?;
        let mut m = Self::new(components.len(), first.dim());
        for (k, c) in components.iter().enumerate() {
            m.set_component(k, c)?;
        }
        Ok(m)
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    fn idx(&self, row: usize, k: usize) -> usize {
        row * self.num_actions + k
    }

    pub fn set_component(&mut self, k: usize, c: &DiagGaussian) -> Result<()> {
        check_index("LatentMixture::set_component", k, self.num_actions)?;
        check_dim("LatentMixture::set_component", self.latent_dim, c.dim())?;
        for d in 0..self.latent_dim {
            let i = self.idx(d, k);
            self.weights[i] = c.mean()[d];
            let j = self.idx(self.latent_dim + d, k);
            self.weights[j] = c.log_var()[d];
        }
        Ok(())
    }

    pub fn component(&self, k: usize) -> Result<DiagGaussian> {
        check_index("mixture_component", k, self.num_actions)?;
        let d = self.latent_dim;
        let mean = (0..d).map(|r| self.weights[self.idx(r, k)]).collect();
        let log_var = (0..d).map(|r| self.weights[self.idx(d + r, k)]).collect();
        DiagGaussian::new(mean, log_var)
    }

    /// Raw (pre-clamp) log-variance of component `k`, dimension `d`.
    pub fn raw_log_var(&self, k: usize, d: usize) -> f64 {
        self.weights[self.idx(self.latent_dim + d, k)]
    }

    pub fn components(&self) -> Vec<DiagGaussian> {
        (0..self.num_actions).map(|k| self.component(k).unwrap()).collect()
    }

    /// Apply the linear map to an arbitrary code vector.
    pub fn map_code(&self, code: &[f64]) -> Result<DiagGaussian> {
        check_dim("LatentMixture::map_code", self.num_actions, code.len())?;
        let rows: Vec<f64> = self
            .weights
            .chunks_exact(self.num_actions)
            .map(|row| row.iter().zip(code).map(|(w, c)| w * c).sum())
            .collect();
        let (mean, log_var) = rows.split_at(self.latent_dim);
        DiagGaussian::new(mean.to_vec(), log_var.to_vec())
    }

    /// Accumulate `∂f/∂(mean_k, log_var_k)` into a weight-shaped gradient,
    /// zeroing log-variance entries whose raw value sits outside the clamp.
    pub(crate) fn accumulate_grad(&self, grad: &mut [f64], k: usize, d_mean: &[f64], d_log_var: &[f64], weight: f64) {
        let dim = self.latent_dim;
        for d in 0..dim {
            let i = self.idx(d, k);
            grad[i] += weight * d_mean[d];
            let j = self.idx(dim + d, k);
            grad[j] += weight * d_log_var[d] * crate::gaussmath::clamp_log_var_grad(self.weights[j]);
        }
    }
}

/// `q(z|y,s)`: either a shared trunk with `K` heads, or `K` disjoint networks.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub trunk: Option<Mlp>,
    pub heads: Vec<Mlp>,
}

/// Normalized probability vector over the `K` actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionPosterior {
    probs: Vec<f64>,
}

impl ActionPosterior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Contract("empty action distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Contract(
                "action probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("action probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn one_hot(index: usize, k: usize) -> Result<Self> {
        check_index("ActionPosterior::one_hot", index, k)?;
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Ok(Self { probs })
    }

    /// Normalize unnormalized log-weights with max subtraction.
    pub fn from_log_weights(log_w: &[f64]) -> Result<Self> {
        if log_w.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFiniteObjective {
                term: "q_y log-weights",
            });
        }
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegeneratePosterior);
        }
        let mut probs: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = k;
            }
        }
        best
    }

    /// `KL(self || p)` given `ln p`; entries with zero mass contribute nothing.
    pub fn kl_to_log(&self, log_p: &[f64]) -> f64 {
        self.probs
            .iter()
            .zip(log_p)
            .filter(|(q, _)| **q > 0.0)
            .map(|(q, lp)| q * (q.ln() - lp))
            .sum()
    }

    /// Indices sorted by decreasing probability (ties by index).
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|a, b| self.probs[*b].total_cmp(&self.probs[*a]).then(a.cmp(b)));
        idx
    }
}

/// Replace the posterior with the one-of-K code of a known label.
pub fn apply_label_override(qy: &ActionPosterior, label: Option<usize>) -> Result<ActionPosterior> {
    match label {
        None => Ok(qy.clone()),
        Some(k) => ActionPosterior::one_hot(k, qy.len()),
    }
}

/// `q(y|x,s) ∝ p(y|s) exp(-H(q(z|x), p(z|y)))` from explicit parts.
pub fn qy_from_parts(
    prior: &ActionPosterior,
    qz: &DiagGaussian,
    components: &[DiagGaussian],
) -> Result<ActionPosterior> {
    check_dim("compute_qy_base", prior.len(), components.len())?;
    let log_prior: Vec<f64> = prior.probs().iter().map(|p| p.ln()).collect();
    qy_base_from_log_prior(&log_prior, qz, components)
}

pub(crate) fn qy_base_from_log_prior(
    log_prior: &[f64],
    qz: &DiagGaussian,
    components: &[DiagGaussian],
) -> Result<ActionPosterior> {
    let mut log_w = Vec::with_capacity(components.len());
    for (lp, c) in log_prior.iter().zip(components) {
        log_w.push(lp - cross_entropy(qz, c)?);
    }
    ActionPosterior::from_log_weights(&log_w)
}

/// Unified-model posterior: the base log-weights minus `KL(q(z'|y,s) || p(z'|y))`.
pub fn qy_unified_from_parts(
    prior: &ActionPosterior,
    qz: &DiagGaussian,
    components: &[DiagGaussian],
    dual: &[DiagGaussian],
) -> Result<ActionPosterior> {
    check_dim("compute_qy_unified", prior.len(), components.len())?;
    let log_prior: Vec<f64> = prior.probs().iter().map(|p| p.ln()).collect();
    qy_unified_from_log_prior(&log_prior, qz, components, dual)
}

pub(crate) fn qy_unified_from_log_prior(
    log_prior: &[f64],
    qz: &DiagGaussian,
    components: &[DiagGaussian],
    dual: &[DiagGaussian],
) -> Result<ActionPosterior> {
    check_dim("compute_qy_unified", components.len(), dual.len())?;
    let mut log_w = Vec::with_capacity(components.len());
    for ((lp, c), d) in log_prior.iter().zip(components).zip(dual) {
        log_w.push(lp - cross_entropy(qz, c)? - kl_diag(d, c)?);
    }
    ActionPosterior::from_log_weights(&log_w)
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Parameter groups, used to freeze parts of the model during a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Classifier,
    Dual,
    Mixture,
}

impl ParamGroup {
    pub fn of_block(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        Some(match head {
            "encoder" => Self::Encoder,
            "decoder" => Self::Decoder,
            "classifier" => Self::Classifier,
            "dual" => Self::Dual,
            "mixture" => Self::Mixture,
            _ => return None,
        })
    }
}

/// Every learnable parameter plus the fixed input/output standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    /// Standardizes encoder inputs and de-standardizes decoder outputs.
    pub traj_norm: Affine,
    pub scenario_norm: Affine,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub classifier: Mlp,
    pub dual: DualEncoder,
    pub mixture: LatentMixture,
}

/// Parameter-shaped gradient of a [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub encoder: MlpGrad,
    pub decoder: MlpGrad,
    pub classifier: MlpGrad,
    pub trunk: Option<MlpGrad>,
    pub heads: Vec<MlpGrad>,
    pub mixture: Vec<f64>,
}

impl ModelState {
    /// Randomly initialized model; the mixture starts as `K` standard normals.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, |dims, head| Mlp::new(dims, head, rng))
    }

    /// All-zero networks and mixture means with unit component variances.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, Mlp::zeros)
    }

    fn build(config: ModelConfig, mut make: impl FnMut(&[usize], OutputHead) -> Result<Mlp>) -> Result<Self> {
        config.validate()?;
        let (t2, s, d, k) = (
            config.traj_dim,
            config.scenario_dim,
            config.latent_dim,
            config.num_actions,
        );
        let dims = |input: usize, output: usize| {
            let mut v = vec![input];
            v.extend(&config.hidden);
            v.push(output);
            v
        };
        let encoder = make(&dims(t2, 2 * d), OutputHead::Gaussian)?;
        let decoder = make(&dims(d, t2), OutputHead::Linear)?;
        let head_dims = |input: usize| {
            let mut v = vec![input];
            v.extend(&config.dual_head_hidden);
            v.push(2 * d);
            v
        };
        let (trunk, head_in) = if config.shared_dual_trunk {
            let mut tdims = vec![s];
            tdims.extend(&config.hidden);
            (Some(make(&tdims, OutputHead::Rectified)?), config.trunk_width())
        } else {
            (None, s)
        };
        let heads = if config.shared_dual_trunk {
            (0..k)
                .map(|_| make(&head_dims(head_in), OutputHead::Gaussian))
                .collect::<Result<Vec<_>>>()?
        } else {
            (0..k)
                .map(|_| make(&dims(s, 2 * d), OutputHead::Gaussian))
                .collect::<Result<Vec<_>>>()?
        };
        let classifier = if config.classifier_on_trunk {
            make(&[config.trunk_width(), k], OutputHead::Linear)?
        } else {
            make(&dims(s, k), OutputHead::Linear)?
        };
        let mixture = LatentMixture::from_components(&vec![DiagGaussian::standard(d); k])?;
        Ok(Self {
            traj_norm: Affine::identity(t2),
            scenario_norm: Affine::identity(s),
            config,
            encoder,
            decoder,
            classifier,
            dual: DualEncoder { trunk, heads },
            mixture,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.config.num_actions
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad {
            encoder: self.encoder.zero_grad(),
            decoder: self.decoder.zero_grad(),
            classifier: self.classifier.zero_grad(),
            trunk: self.dual.trunk.as_ref().map(Mlp::zero_grad),
            heads: self.dual.heads.iter().map(Mlp::zero_grad).collect(),
            mixture: vec![0.0; self.mixture.weights.len()],
        }
    }

    /// `q(z|x)`.
    pub fn encode_x(&self, x: &[f64]) -> Result<DiagGaussian> {
        check_dim("encode_x", self.config.traj_dim, x.len())?;
        self.encoder.forward_gaussian(&self.traj_norm.normalize(x))
    }

    /// Mean of `p(x|z)` in meters.
    pub fn decode_z(&self, z: &LatentPoint) -> Result<Vec<f64>> {
        check_dim("decode_z", self.config.latent_dim, z.dim())?;
        Ok(self.traj_norm.denormalize(&self.decoder.forward(z.coords())?))
    }

    /// Shared trunk features for a scenario, when the trunk exists.
    pub fn trunk_features(&self, s: &[f64]) -> Result<Option<Vec<f64>>> {
        check_dim("scenario", self.config.scenario_dim, s.len())?;
        match &self.dual.trunk {
            Some(t) => Ok(Some(t.forward(&self.scenario_norm.normalize(s))?)),
            None => Ok(None),
        }
    }

    pub fn prior_logits(&self, s: &[f64]) -> Result<Vec<f64>> {
        check_dim("prior_y", self.config.scenario_dim, s.len())?;
        if self.config.classifier_on_trunk {
            let f = self.trunk_features(s)?.expect("classifier_on_trunk implies a trunk");
            self.classifier.forward(&f)
        } else {
            self.classifier.forward(&self.scenario_norm.normalize(s))
        }
    }

    pub fn log_prior_y(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.prior_logits(s)?))
    }

    /// `p(y|s)`.
    pub fn prior_y(&self, s: &[f64]) -> Result<ActionPosterior> {
        let logits = self.prior_logits(s)?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        ActionPosterior::new(p)
    }

    /// Component `k` of `p(z|y)`.
    pub fn mixture_component(&self, k: usize) -> Result<DiagGaussian> {
        self.mixture.component(k)
    }

    /// `q(z|y=k, s)`.
    pub fn dual_encode(&self, s: &[f64], k: usize) -> Result<DiagGaussian> {
        check_index("dual_encode", k, self.num_actions())?;
        let input = self.dual_head_input(s)?;
        self.dual.heads[k].forward_gaussian(&input)
    }

    /// `q(z|y,s)` for every action, sharing the trunk evaluation.
    pub fn dual_encode_all(&self, s: &[f64]) -> Result<Vec<DiagGaussian>> {
        let input = self.dual_head_input(s)?;
        self.dual.heads.iter().map(|h| h.forward_gaussian(&input)).collect()
    }

    fn dual_head_input(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(match self.trunk_features(s)? {
            Some(f) => f,
            None => self.scenario_norm.normalize(s),
        })
    }

    /// `q(y|x,s)` for the base model.
    pub fn compute_qy_base(&self, x: &[f64], s: &[f64]) -> Result<ActionPosterior> {
        let qz = self.encode_x(x)?;
        qy_base_from_log_prior(&self.log_prior_y(s)?, &qz, &self.mixture.components())
    }

    /// `q(y|x,s)` for the unified model.
    pub fn compute_qy_unified(&self, x: &[f64], s: &[f64]) -> Result<ActionPosterior> {
        let qz = self.encode_x(x)?;
        let dual = self.dual_encode_all(s)?;
        qy_unified_from_log_prior(&self.log_prior_y(s)?, &qz, &self.mixture.components(), &dual)
    }

    /// Make every dual head output exactly its prior component: last-layer
    /// weights zero, last-layer bias equal to `(mean_k, log_var_k)`.
    pub fn pin_dual_to_priors(&mut self) {
        for k in 0..self.num_actions() {
            let raw: Vec<f64> = {
                let c = self.mixture.component(k).unwrap();
                c.mean().iter().chain(c.log_var()).copied().collect()
            };
            let last = self.dual.heads[k].layers_mut().last_mut().unwrap();
            last.weights.iter_mut().for_each(|w| *w = 0.0);
            last.bias.copy_from_slice(&raw);
        }
    }

    /// Start each dual head near its prior component: last-layer bias set to
    /// the component parameters, last-layer weights scaled by `weight_scale`.
    pub fn seed_dual_from_priors(&mut self, weight_scale: f64) {
        for k in 0..self.num_actions() {
            let c = self.mixture.component(k).unwrap();
            let raw: Vec<f64> = c.mean().iter().chain(c.log_var()).copied().collect();
            let last = self.dual.heads[k].layers_mut().last_mut().unwrap();
            last.weights.iter_mut().for_each(|w| *w *= weight_scale);
            last.bias.copy_from_slice(&raw);
        }
    }

    /// Trainable parameter blocks in a fixed order.
    pub fn named_blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.encoder.blocks("encoder", &mut out);
        self.decoder.blocks("decoder", &mut out);
        self.classifier.blocks("classifier", &mut out);
        if let Some(t) = &self.dual.trunk {
            t.blocks("dual.trunk", &mut out);
        }
        for (k, h) in self.dual.heads.iter().enumerate() {
            h.blocks(&format!("dual.head{k}"), &mut out);
        }
        out.push(("mixture.weight".into(), &self.mixture.weights));
        out
    }

    pub fn named_blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.encoder.blocks_mut("encoder", &mut out);
        self.decoder.blocks_mut("decoder", &mut out);
        self.classifier.blocks_mut("classifier", &mut out);
        if let Some(t) = &mut self.dual.trunk {
            t.blocks_mut("dual.trunk", &mut out);
        }
        for (k, h) in self.dual.heads.iter_mut().enumerate() {
            h.blocks_mut(&format!("dual.head{k}"), &mut out);
        }
        out.push(("mixture.weight".into(), &mut self.mixture.weights));
        out
    }

    /// Fixed standardization blocks (not trained).
    pub fn norm_blocks(&self) -> Vec<(String, &[f64])> {
        vec![
            ("norm.traj.shift".into(), &self.traj_norm.shift[..]),
            ("norm.traj.scale".into(), &self.traj_norm.scale[..]),
            ("norm.scenario.shift".into(), &self.scenario_norm.shift[..]),
            ("norm.scenario.scale".into(), &self.scenario_norm.scale[..]),
        ]
    }

    pub fn norm_blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("norm.traj.shift".into(), &mut self.traj_norm.shift[..]),
            ("norm.traj.scale".into(), &mut self.traj_norm.scale[..]),
            ("norm.scenario.shift".into(), &mut self.scenario_norm.shift[..]),
            ("norm.scenario.scale".into(), &mut self.scenario_norm.scale[..]),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.named_blocks()
            .iter()
            .chain(self.norm_blocks().iter())
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

impl ModelGrad {
    pub fn named_blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.encoder.blocks("encoder", &mut out);
        self.decoder.blocks("decoder", &mut out);
        self.classifier.blocks("classifier", &mut out);
        if let Some(t) = &self.trunk {
            t.blocks("dual.trunk", &mut out);
        }
        for (k, h) in self.heads.iter().enumerate() {
            h.blocks(&format!("dual.head{k}"), &mut out);
        }
        out.push(("mixture.weight".into(), &self.mixture));
        out
    }

    pub fn add_assign(&mut self, other: &ModelGrad) {
        self.encoder.add_assign(&other.encoder);
        self.decoder.add_assign(&other.decoder);
        self.classifier.add_assign(&other.classifier);
        if let (Some(a), Some(b)) = (&mut self.trunk, &other.trunk) {
            a.add_assign(b);
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.add_assign(b);
        }
        add_into(&mut self.mixture, &other.mixture);
    }

    pub fn scale(&mut self, s: f64) {
        self.encoder.scale(s);
        self.decoder.scale(s);
        self.classifier.scale(s);
        if let Some(t) = &mut self.trunk {
            t.scale(s);
        }
        self.heads.iter_mut().for_each(|h| h.scale(s));
        self.mixture.iter_mut().for_each(|v| *v *= s);
    }

    pub fn group_is_zero(&self, group: ParamGroup) -> bool {
        self.named_blocks()
            .iter()
            .filter(|(n, _)| ParamGroup::of_block(n) == Some(group))
            .all(|(_, b)| b.iter().all(|v| *v == 0.0))
    }
}
