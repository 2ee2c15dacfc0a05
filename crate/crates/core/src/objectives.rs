//! Single-sample training objectives and their exact gradients.
//!
//! All objectives are lower bounds to be maximized; reports carry that sign.
//! The discrete posterior `q(y|x,s)` is computed from the current parameters
//! and then held constant, so no gradient flows through it.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_index, Error, Result};
use crate::gaussmath::{cross_entropy, kl_diag, kl_diag_grad, log_pdf_identity_cov, DiagGaussian};
use crate::model::{log_softmax, ActionPosterior, ModelGrad, ModelState, ParamGroup};
use crate::neuralnet::MlpTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Standard VAE bound with an `N(0, I)` latent prior (pretraining).
    Vae,
    /// Gaussian-mixture bound of the base model.
    Base,
    /// Dual-encoder bound: trains `q(z|y,s)` against a frozen base model.
    Dual,
    /// Joint bound of the unified model.
    Unified,
}

impl ObjectiveKind {
    /// Groups that receive gradients by default.
    pub fn default_groups(self, classifier_on_trunk: bool) -> Vec<ParamGroup> {
        use ParamGroup::*;
        match self {
            ObjectiveKind::Vae => vec![Encoder, Decoder],
            ObjectiveKind::Base if classifier_on_trunk => vec![Encoder, Decoder, Classifier, Mixture, Dual],
            ObjectiveKind::Base => vec![Encoder, Decoder, Classifier, Mixture],
            ObjectiveKind::Dual => vec![Dual],
            ObjectiveKind::Unified => vec![Encoder, Decoder, Classifier, Dual, Mixture],
        }
    }
}

/// Multipliers on the divergence terms. All exactly 1 unless configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub kl_y: f64,
    pub kl_z: f64,
    pub kl_z_prime: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            kl_y: 1.0,
            kl_z: 1.0,
            kl_z_prime: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub kind: ObjectiveKind,
    pub total: f64,
    pub recon_x: f64,
    pub recon_x_prime: f64,
    pub kl_y: f64,
    pub expected_kl_z: f64,
    pub expected_kl_z_prime: f64,
    pub qy_used: ActionPosterior,
}

impl ObjectiveReport {
    /// Recompute the total from the terms. `kl_y` is monitored but not part of
    /// the dual objective.
    pub fn signed_sum(&self, w: &ObjectiveWeights) -> f64 {
        match self.kind {
            ObjectiveKind::Vae => self.recon_x - w.kl_z * self.expected_kl_z,
            ObjectiveKind::Base => self.recon_x - w.kl_y * self.kl_y - w.kl_z * self.expected_kl_z,
            ObjectiveKind::Dual => self.recon_x_prime - w.kl_z_prime * self.expected_kl_z_prime,
            ObjectiveKind::Unified => {
                self.recon_x + self.recon_x_prime
                    - w.kl_y * self.kl_y
                    - w.kl_z * self.expected_kl_z
                    - w.kl_z_prime * self.expected_kl_z_prime
            }
        }
    }
}

/// Caller-supplied standard-normal draws.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Noise {
    /// Draw for `z ~ q(z|x)`, dimension `D`.
    pub z: Vec<f64>,
    /// Draws for `z'_y ~ q(z|y,s)`, sample-major: entry `j*K + k` is draw `j`
    /// for action `k`. Length must be a positive multiple of `K`.
    pub per_action: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Use this `q_y` instead of computing it from the model.
    pub fixed_qy: Option<ActionPosterior>,
    /// Known action label; replaces `q_y` with its one-of-K code.
    pub label: Option<usize>,
    pub weights: ObjectiveWeights,
    /// Groups receiving gradients; `None` means the kind's default.
    pub groups: Option<Vec<ParamGroup>>,
}

/// Base bound: `ln p(x|z̃) − KL(q_y||p_y) − Σ_y q_y KL(q(z|x)||p(z|y))`.
pub fn elbo_base(m: &ModelState, x: &[f64], s: &[f64], noise_z: &[f64]) -> Result<ObjectiveReport> {
    let noise = Noise {
        z: noise_z.to_vec(),
        per_action: Vec::new(),
    };
    evaluate(m, ObjectiveKind::Base, x, s, &noise, &EvalOptions::default(), None)
}

/// Dual-encoder bound: `Σ_y q_y [ln p(x|z̃_y) − KL(q(z|y,s)||p(z|y))]` with
/// `z̃_y ~ q(z|y,s)` and `q_y` from the base posterior.
pub fn loss_dual(m: &ModelState, x: &[f64], s: &[f64], noise_per_k: &[Vec<f64>]) -> Result<ObjectiveReport> {
    let noise = Noise {
        z: Vec::new(),
        per_action: noise_per_k.to_vec(),
    };
    evaluate(m, ObjectiveKind::Dual, x, s, &noise, &EvalOptions::default(), None)
}

/// Unified bound, with `q_y` from the unified posterior.
pub fn loss_unified(
    m: &ModelState,
    x: &[f64],
    s: &[f64],
    noise_z: &[f64],
    noise_per_k: &[Vec<f64>],
) -> Result<ObjectiveReport> {
    let noise = Noise {
        z: noise_z.to_vec(),
        per_action: noise_per_k.to_vec(),
    };
    evaluate(m, ObjectiveKind::Unified, x, s, &noise, &EvalOptions::default(), None)
}

/// Evaluate an objective and its gradient with respect to every parameter
/// (zero for groups outside `opts.groups`).
pub fn objective_gradient(
    m: &ModelState,
    kind: ObjectiveKind,
    x: &[f64],
    s: &[f64],
    noise: &Noise,
    opts: &EvalOptions,
) -> Result<(ObjectiveReport, ModelGrad)> {
    let mut grad = m.zero_grad();
    let report = evaluate(m, kind, x, s, noise, opts, Some(&mut grad))?;
    Ok((report, grad))
}

fn finite(v: f64, term: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteObjective { term })
    }
}

struct Sampled {
    trace: MlpTrace,
    recon: f64,
    /// `∂ recon / ∂ z`, before any weighting.
    d_z: Vec<f64>,
}

/// Draw `z = μ + σ ε`, decode, score against `x`; backpropagate the
/// reconstruction through the decoder (accumulating decoder gradients scaled
/// by `grad_weight` when requested).
fn reconstruct(
    m: &ModelState,
    q: &DiagGaussian,
    eps: &[f64],
    x: &[f64],
    grad_weight: f64,
    decoder_grad: Option<&mut crate::neuralnet::MlpGrad>,
    want_grad: bool,
) -> Result<Sampled> {
    let z = crate::gaussmath::sample_reparam(q, eps)?;
    let trace = m.decoder.forward_cached(z.coords())?;
    let x_hat = m.traj_norm.denormalize(trace.output());
    let recon = log_pdf_identity_cov(&x_hat, x)?;
    let mut d_z = Vec::new();
    if want_grad {
        let upstream: Vec<f64> = x
            .iter()
            .zip(&x_hat)
            .zip(&m.traj_norm.scale)
            .map(|((xi, xh), sc)| grad_weight * sc * (xi - xh))
            .collect();
        d_z = m.decoder.backward(&trace, &upstream, decoder_grad)?;
    }
    Ok(Sampled { trace, recon, d_z })
}

/// Chain `∂f/∂z` through `z = μ + exp(ℓ/2) ε` into mean and log-variance.
fn reparam_backward(q: &DiagGaussian, eps: &[f64], d_z: &[f64], d_mean: &mut [f64], d_log_var: &mut [f64]) {
    for (d, sigma) in q.std_devs().enumerate() {
        d_mean[d] += d_z[d];
        d_log_var[d] += d_z[d] * eps[d] * 0.5 * sigma;
    }
}

pub fn evaluate(
    m: &ModelState,
    kind: ObjectiveKind,
    x: &[f64],
    s: &[f64],
    noise: &Noise,
    opts: &EvalOptions,
    mut grad: Option<&mut ModelGrad>,
) -> Result<ObjectiveReport> {
    let cfg = &m.config;
    let k_count = cfg.num_actions;
    let dim = cfg.latent_dim;
    check_dim("objective trajectory", cfg.traj_dim, x.len())?;
    check_dim("objective scenario", cfg.scenario_dim, s.len())?;
    let uses_z = matches!(kind, ObjectiveKind::Vae | ObjectiveKind::Base | ObjectiveKind::Unified);
    let uses_dual = matches!(kind, ObjectiveKind::Dual | ObjectiveKind::Unified);
    if uses_z {
        check_dim("objective noise_z", dim, noise.z.len())?;
    }
    let n_dual_samples = if uses_dual {
        if noise.per_action.is_empty() || !noise.per_action.len().is_multiple_of(k_count) {
            return Err(Error::Contract(format!(
                "per-action noise must hold a positive multiple of K = {k_count} draws, got {}",
                noise.per_action.len()
            )));
        }
        for e in &noise.per_action {
            check_dim("objective noise_per_k", dim, e.len())?;
        }
        noise.per_action.len() / k_count
    } else {
        0
    };
    if let Some(label) = opts.label {
        check_index("label override", label, k_count)?;
    }

    let groups = opts
        .groups
        .clone()
        .unwrap_or_else(|| kind.default_groups(cfg.classifier_on_trunk));
    let want = |g: ParamGroup| grad.is_some() && groups.contains(&g);
    let (g_enc, g_dec, g_cls, g_dual, g_mix) = (
        want(ParamGroup::Encoder),
        want(ParamGroup::Decoder),
        want(ParamGroup::Classifier),
        want(ParamGroup::Dual),
        want(ParamGroup::Mixture),
    );
    let any_grad = grad.is_some();
    let w = opts.weights;

    // q(z|x)
    let enc_trace = m.encoder.forward_cached(&m.traj_norm.normalize(x))?;
    let qz = enc_trace.gaussian();
    let mut d_q_mean = vec![0.0; dim];
    let mut d_q_log_var = vec![0.0; dim];

    if kind == ObjectiveKind::Vae {
        let prior = DiagGaussian::standard(dim);
        let dec_grad = if g_dec {
            grad.as_deref_mut().map(|g| &mut g.decoder)
        } else {
            None
        };
        let sampled = reconstruct(m, &qz, &noise.z, x, 1.0, dec_grad, any_grad)?;
        let recon = finite(sampled.recon, "recon_x")?;
        let kl = finite(kl_diag(&qz, &prior)?, "kl_z")?;
        if let Some(g) = grad.as_deref_mut() {
            reparam_backward(&qz, &noise.z, &sampled.d_z, &mut d_q_mean, &mut d_q_log_var);
            let kg = kl_diag_grad(&qz, &prior)?;
            for d in 0..dim {
                d_q_mean[d] -= w.kl_z * kg.q_mean[d];
                d_q_log_var[d] -= w.kl_z * kg.q_log_var[d];
            }
            if g_enc {
                let up: Vec<f64> = d_q_mean.iter().chain(&d_q_log_var).copied().collect();
                m.encoder.backward(&enc_trace, &up, Some(&mut g.encoder))?;
            }
        }
        let _ = sampled.trace;
        return Ok(ObjectiveReport {
            kind,
            total: recon - w.kl_z * kl,
            recon_x: recon,
            recon_x_prime: 0.0,
            kl_y: 0.0,
            expected_kl_z: kl,
            expected_kl_z_prime: 0.0,
            qy_used: ActionPosterior::uniform(1),
        });
    }

    // Scenario side: optional trunk, classifier, dual heads.
    let s_norm = m.scenario_norm.normalize(s);
    let trunk_trace = match &m.dual.trunk {
        Some(t) if uses_dual || cfg.classifier_on_trunk => Some(t.forward_cached(&s_norm)?),
        _ => None,
    };
    let cls_input: &[f64] = if cfg.classifier_on_trunk {
        trunk_trace.as_ref().expect("trunk present").output()
    } else {
        &s_norm
    };
    let cls_trace = m.classifier.forward_cached(cls_input)?;
    let log_p = log_softmax(cls_trace.output());
    if log_p.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFiniteObjective { term: "p(y|s)" });
    }

    let comps = m.mixture.components();
    let head_input: Vec<f64> = match &trunk_trace {
        Some(t) => t.output().to_vec(),
        None => s_norm.clone(),
    };
    let head_traces: Vec<MlpTrace> = if uses_dual {
        m.dual
            .heads
            .iter()
            .map(|h| h.forward_cached(&head_input))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let dual_q: Vec<DiagGaussian> = head_traces.iter().map(MlpTrace::gaussian).collect();

    // Discrete posterior, held constant below.
    let qy = if let Some(label) = opts.label {
        ActionPosterior::one_hot(label, k_count)?
    } else if let Some(q) = &opts.fixed_qy {
        check_dim("fixed q_y", k_count, q.len())?;
        q.clone()
    } else {
        let mut log_w = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let mut v = log_p[k] - cross_entropy(&qz, &comps[k])?;
            if kind == ObjectiveKind::Unified {
                v -= kl_diag(&dual_q[k], &comps[k])?;
            }
            log_w.push(v);
        }
        ActionPosterior::from_log_weights(&log_w)?
    };
    let q = qy.probs();

    let kl_y = finite(qy.kl_to_log(&log_p), "kl_y")?;
    let mut mix_grad_buf = if g_mix {
        vec![0.0; m.mixture.weights().len()]
    } else {
        Vec::new()
    };

    let mut recon_x = 0.0;
    let mut expected_kl_z = 0.0;
    if kind != ObjectiveKind::Dual {
        let dec_grad = if g_dec {
            grad.as_deref_mut().map(|g| &mut g.decoder)
        } else {
            None
        };
        let sampled = reconstruct(m, &qz, &noise.z, x, 1.0, dec_grad, g_enc || g_dec)?;
        recon_x = finite(sampled.recon, "recon_x")?;
        if g_enc {
            reparam_backward(&qz, &noise.z, &sampled.d_z, &mut d_q_mean, &mut d_q_log_var);
        }
        for k in 0..k_count {
            if q[k] == 0.0 {
                continue;
            }
            expected_kl_z += q[k] * kl_diag(&qz, &comps[k])?;
            if g_enc || g_mix {
                let kg = kl_diag_grad(&qz, &comps[k])?;
                let wk = w.kl_z * q[k];
                for d in 0..dim {
                    d_q_mean[d] -= wk * kg.q_mean[d];
                    d_q_log_var[d] -= wk * kg.q_log_var[d];
                }
                if g_mix {
                    m.mixture
                        .accumulate_grad(&mut mix_grad_buf, k, &kg.p_mean, &kg.p_log_var, -wk);
                }
            }
        }
        expected_kl_z = finite(expected_kl_z, "expected_kl_z")?;
    }

    let mut recon_x_prime = 0.0;
    let mut expected_kl_z_prime = 0.0;
    let mut trunk_upstream = vec![0.0; head_input.len()];
    if uses_dual {
        let inv_n = 1.0 / n_dual_samples as f64;
        for k in 0..k_count {
            if q[k] == 0.0 {
                continue;
            }
            let qk = &dual_q[k];
            let mut d_mean = vec![0.0; dim];
            let mut d_log_var = vec![0.0; dim];
            let need_z_grad = g_dual;
            let mut recon_k = 0.0;
            for j in 0..n_dual_samples {
                let eps = &noise.per_action[j * k_count + k];
                let dec_grad = if g_dec {
                    grad.as_deref_mut().map(|g| &mut g.decoder)
                } else {
                    None
                };
                let sampled = reconstruct(m, qk, eps, x, q[k] * inv_n, dec_grad, need_z_grad || g_dec)?;
                recon_k += sampled.recon * inv_n;
                if need_z_grad {
                    reparam_backward(qk, eps, &sampled.d_z, &mut d_mean, &mut d_log_var);
                }
            }
            recon_x_prime += q[k] * recon_k;
            expected_kl_z_prime += q[k] * kl_diag(qk, &comps[k])?;
            if g_dual || g_mix {
                let kg = kl_diag_grad(qk, &comps[k])?;
                let wk = w.kl_z_prime * q[k];
                for d in 0..dim {
                    d_mean[d] -= wk * kg.q_mean[d];
                    d_log_var[d] -= wk * kg.q_log_var[d];
                }
                if g_mix {
                    m.mixture
                        .accumulate_grad(&mut mix_grad_buf, k, &kg.p_mean, &kg.p_log_var, -wk);
                }
            }
            if g_dual {
                let g = grad.as_deref_mut().unwrap();
                let up: Vec<f64> = d_mean.iter().chain(&d_log_var).copied().collect();
                let d_in = m.dual.heads[k].backward(&head_traces[k], &up, Some(&mut g.heads[k]))?;
                if trunk_trace.is_some() {
                    for (t, v) in trunk_upstream.iter_mut().zip(d_in) {
                        *t += v;
                    }
                }
            }
        }
        recon_x_prime = finite(recon_x_prime, "recon_x_prime")?;
        expected_kl_z_prime = finite(expected_kl_z_prime, "expected_kl_z_prime")?;
    }

    if let Some(g) = grad {
        if g_enc && kind != ObjectiveKind::Dual {
            let up: Vec<f64> = d_q_mean.iter().chain(&d_q_log_var).copied().collect();
            m.encoder.backward(&enc_trace, &up, Some(&mut g.encoder))?;
        }
        let cls_to_trunk = cfg.classifier_on_trunk && g_dual;
        if kind != ObjectiveKind::Dual && (g_cls || cls_to_trunk) {
            // ∂(−w·KL(q_y || softmax(a)))/∂a = w (q_y − p_y)
            let up: Vec<f64> = q.iter().zip(&log_p).map(|(qv, lp)| w.kl_y * (qv - lp.exp())).collect();
            let cls_grad = if g_cls { Some(&mut g.classifier) } else { None };
            let d_in = m.classifier.backward(&cls_trace, &up, cls_grad)?;
            if cls_to_trunk {
                for (t, v) in trunk_upstream.iter_mut().zip(d_in) {
                    *t += v;
                }
            }
        }
        if g_dual {
            if let (Some(trunk), Some(trace), Some(tg)) = (&m.dual.trunk, &trunk_trace, g.trunk.as_mut()) {
                trunk.backward(trace, &trunk_upstream, Some(tg))?;
            }
        }
        if g_mix {
            crate::neuralnet::add_into(&mut g.mixture, &mix_grad_buf);
        }
    }

    let report = ObjectiveReport {
        kind,
        total: 0.0,
        recon_x,
        recon_x_prime,
        kl_y,
        expected_kl_z,
        expected_kl_z_prime,
        qy_used: qy,
    };
    let total = finite(report.signed_sum(&w), "total")?;
    Ok(ObjectiveReport { total, ..report })
}
