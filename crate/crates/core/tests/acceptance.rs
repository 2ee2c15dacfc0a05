//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_UNATTAINABLE` still run and still print FAIL
//! when they fail; they do not fail the process. Any other failure does.

use std::process::ExitCode;
use std::time::Instant;

use actionset::checkpoint::StageMarker;
use actionset::evaluation::{predict, PredictionMode};
use actionset::gaussmath::{
    cross_entropy, kl_diag, log_pdf_identity_cov, normal_pdf, DiagGaussian, LatentPoint, LN_2PI,
};
use actionset::model::{ModelConfig, ModelState, ParamGroup};
use actionset::neuralnet::{Layer, Mlp, OutputHead};
use actionset::objectives::{evaluate, EvalOptions, Noise, ObjectiveKind};
use actionset::pipeline::{run_pipeline, PipelineConfig, PipelineRun};
use actionset::training::smoothed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

// Pinned tolerances.
const C1_TOL: f64 = 1e-6;
const C1_PAIRS: usize = 100;
const C1_MAX_SECS: f64 = 5.0;
const C2_REL_TOL: f64 = 1e-5;
const C2_DENOM_FLOOR: f64 = 1e-3;
const C2_STEP: f64 = 1e-4;
const C2_MODELS: usize = 20;
const C2_MAX_SECS: f64 = 120.0;
const C3_CONFIGS: usize = 100;
const C3_PERTURBATIONS: usize = 1000;
const C3_SLACK: f64 = 1e-9;
const C4_DRAWS: usize = 100_000;
const C4_MODELS: usize = 10;
const C4_SIGMAS: f64 = 3.0;
const C5_TOL: f64 = 1e-12;
const C6_MIN_ACTIONS: usize = 6;
const C6_MAX_ACTIONS: usize = 12;
const C6_MIN_NMI: f64 = 0.6;
const C6_MAX_SECS: f64 = 15.0 * 60.0;
const C7_RATIO: f64 = 0.5;

const KNOWN_UNATTAINABLE: &[u32] = &[3];

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normals<R: Rng>(r: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn rand_gaussian<R: Rng>(r: &mut R, dim: usize, mean_range: f64, lv_range: f64) -> DiagGaussian {
    let mean = (0..dim).map(|_| r.random_range(-mean_range..mean_range)).collect();
    let lv = (0..dim).map(|_| r.random_range(-lv_range..lv_range)).collect();
    DiagGaussian::new(mean, lv).unwrap()
}

fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = 0.5 * (f(lo) + f(hi));
    for i in 1..n {
        s += f(lo + i as f64 * h);
    }
    s * h
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..C1_PAIRS {
        let dim = r.random_range(1..=4);
        let q = rand_gaussian(&mut r, dim, 3.0, 2.0);
        let p = rand_gaussian(&mut r, dim, 3.0, 2.0);
        let (mut kl_quad, mut ce_quad) = (0.0, 0.0);
        for d in 0..dim {
            let (mq, vq) = (q.mean()[d], q.log_var()[d].exp());
            let (mp, vp) = (p.mean()[d], p.log_var()[d].exp());
            let (lo, hi) = (mq - 14.0 * vq.sqrt(), mq + 14.0 * vq.sqrt());
            let ln_p = |x: f64| -0.5 * (LN_2PI + vp.ln() + (x - mp).powi(2) / vp);
            let ln_q = |x: f64| -0.5 * (LN_2PI + vq.ln() + (x - mq).powi(2) / vq);
            kl_quad += trapezoid(|x| normal_pdf(x, mq, vq) * (ln_q(x) - ln_p(x)), lo, hi, 20_000);
            ce_quad += trapezoid(|x| -normal_pdf(x, mq, vq) * ln_p(x), lo, hi, 20_000);
        }
        worst = worst
            .max((kl_diag(&q, &p).unwrap() - kl_quad).abs())
            .max((cross_entropy(&q, &p).unwrap() - ce_quad).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        name: "analytic KL / cross entropy vs quadrature",
        pass: worst < C1_TOL && secs < C1_MAX_SECS,
        detail: format!(
            "{C1_PAIRS} pairs, max abs err {worst:.2e} (tol {C1_TOL:.0e}), {secs:.2}s (limit {C1_MAX_SECS}s)"
        ),
    }
}

// ---------------------------------------------------------------- 2

fn tiny_model(r: &mut ChaCha8Rng) -> ModelState {
    let shared = r.random_bool(0.7);
    let cfg = ModelConfig {
        traj_dim: 2 * r.random_range(2..=4),
        scenario_dim: r.random_range(2..=4),
        latent_dim: r.random_range(1..=2),
        num_actions: r.random_range(2..=3),
        hidden: vec![r.random_range(3..=8)],
        dual_head_hidden: if shared && r.random_bool(0.5) {
            vec![r.random_range(2..=5)]
        } else {
            vec![]
        },
        shared_dual_trunk: shared,
        classifier_on_trunk: shared && r.random_bool(0.4),
    };
    let mut m = ModelState::new(cfg, r).unwrap();
    // Random mixture and normalizers so every code path is exercised.
    let (d, k) = (m.latent_dim(), m.num_actions());
    for j in 0..k {
        m.mixture.set_component(j, &rand_gaussian(r, d, 1.5, 1.0)).unwrap();
    }
    for v in m.traj_norm.shift.iter_mut() {
        *v = r.random_range(-1.0..1.0);
    }
    for v in m.traj_norm.scale.iter_mut() {
        *v = r.random_range(0.5..2.0);
    }
    // Keep Gaussian-head log-variances in a moderate range.
    let heads = std::iter::once(&mut m.encoder).chain(m.dual.heads.iter_mut());
    for net in heads {
        for w in net.layers_mut().last_mut().unwrap().weights.iter_mut() {
            *w *= 0.3;
        }
    }
    m
}

fn all_groups() -> Vec<ParamGroup> {
    use ParamGroup::*;
    vec![Encoder, Decoder, Classifier, Dual, Mixture]
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(202);
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut checked = 0usize;
    for model_idx in 0..C2_MODELS {
        let base = tiny_model(&mut r);
        let cfg = base.config.clone();
        let x: Vec<f64> = normals(&mut r, cfg.traj_dim).iter().map(|v| 2.0 * v).collect();
        let s = normals(&mut r, cfg.scenario_dim);
        let n_dual = r.random_range(1..=2);
        let noise = Noise {
            z: normals(&mut r, cfg.latent_dim),
            per_action: (0..n_dual * cfg.num_actions)
                .map(|_| normals(&mut r, cfg.latent_dim))
                .collect(),
        };
        for kind in [ObjectiveKind::Base, ObjectiveKind::Dual, ObjectiveKind::Unified] {
            // q_y is held constant inside the gradient; the oracle does the same.
            let qy = evaluate(&base, kind, &x, &s, &noise, &EvalOptions::default(), None)
                .unwrap()
                .qy_used;
            let opts = EvalOptions {
                fixed_qy: Some(qy),
                groups: Some(all_groups()),
                ..Default::default()
            };
            let mut grad = base.zero_grad();
            evaluate(&base, kind, &x, &s, &noise, &opts, Some(&mut grad)).unwrap();
            let analytic: Vec<(String, Vec<f64>)> =
                grad.named_blocks().into_iter().map(|(n, b)| (n, b.to_vec())).collect();
            let f = |m: &ModelState| evaluate(m, kind, &x, &s, &noise, &opts, None).unwrap().total;
            let mut m = base.clone();
            for (bi, (name, a_block)) in analytic.iter().enumerate() {
                for i in 0..a_block.len() {
                    let orig = m.named_blocks_mut()[bi].1[i];
                    let mut central = |h: f64| {
                        m.named_blocks_mut()[bi].1[i] = orig + h;
                        let up = f(&m);
                        m.named_blocks_mut()[bi].1[i] = orig - h;
                        let down = f(&m);
                        m.named_blocks_mut()[bi].1[i] = orig;
                        (up - down) / (2.0 * h)
                    };
                    // Richardson extrapolation of two central differences, error O(h^4).
                    let fd = (4.0 * central(0.5 * C2_STEP) - central(C2_STEP)) / 3.0;
                    let a = a_block[i];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(C2_DENOM_FLOOR);
                    checked += 1;
                    if rel > worst {
                        worst = rel;
                        worst_at = format!("model {model_idx} {kind:?} {name}[{i}]: analytic {a:.6e} fd {fd:.6e}");
                    }
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        id: 2,
        name: "gradient integrity (central differences)",
        pass: worst < C2_REL_TOL && secs < C2_MAX_SECS,
        detail: format!(
            "{C2_MODELS} models, {checked} coordinates, max rel err {worst:.2e} (tol {C2_REL_TOL:.0e}, denominator floor {C2_DENOM_FLOOR:.0e}, Richardson step {C2_STEP:.0e}), {secs:.1}s (limit {C2_MAX_SECS}s); worst {worst_at}"
        ),
    }
}

// ---------------------------------------------------------------- 3

/// A tiny model whose decoder is a single linear layer, so expectations of
/// `ln p(x|z)` under a diagonal Gaussian are exact.
fn linear_decoder_model(r: &mut ChaCha8Rng, d: usize, k: usize, t2: usize, s_dim: usize) -> ModelState {
    let cfg = ModelConfig {
        traj_dim: t2,
        scenario_dim: s_dim,
        latent_dim: d,
        num_actions: k,
        hidden: vec![6],
        dual_head_hidden: vec![],
        shared_dual_trunk: true,
        classifier_on_trunk: false,
    };
    let mut m = ModelState::new(cfg, r).unwrap();
    let mut layer = Layer::zeros(d, t2);
    layer.weights = normals(r, d * t2);
    layer.bias = normals(r, t2);
    m.decoder = Mlp::from_layers(vec![layer], OutputHead::Linear).unwrap();
    for j in 0..k {
        m.mixture.set_component(j, &rand_gaussian(r, d, 2.0, 1.0)).unwrap();
    }
    // Larger classifier output spread gives non-trivial priors.
    for w in m.classifier.layers_mut().last_mut().unwrap().weights.iter_mut() {
        *w *= 3.0;
    }
    m
}

/// `E_{z ~ g} ln N(x; W z + b, I)` for the linear decoder of `m`.
fn expected_recon_linear(m: &ModelState, g: &DiagGaussian, x: &[f64]) -> f64 {
    let layer = &m.decoder.layers()[0];
    let mean = m.decode_z(&LatentPoint(g.mean().to_vec())).unwrap();
    let mut trace = 0.0;
    let vars: Vec<f64> = g.variances().collect();
    for o in 0..layer.n_out {
        let scale = m.traj_norm.scale[o];
        for (i, v) in vars.iter().enumerate() {
            trace += (scale * layer.weights[o * layer.n_in + i]).powi(2) * v;
        }
    }
    log_pdf_identity_cov(&mean, x).unwrap() - 0.5 * trace
}

struct Terms {
    log_prior: Vec<f64>,
    kl_z: Vec<f64>,
    kl_dual: Vec<f64>,
    recon_dual: Vec<f64>,
}

fn kl_simplex(q: &[f64], log_p: &[f64]) -> f64 {
    q.iter()
        .zip(log_p)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, lp)| a * (a.ln() - lp))
        .sum()
}

fn base_objective(t: &Terms, q: &[f64]) -> f64 {
    -kl_simplex(q, &t.log_prior) - q.iter().zip(&t.kl_z).map(|(a, k)| a * k).sum::<f64>()
}

fn unified_objective(t: &Terms, q: &[f64], with_dual_recon: bool) -> f64 {
    let mut v = base_objective(t, q);
    for k in 0..q.len() {
        v -= q[k] * t.kl_dual[k];
        if with_dual_recon {
            v += q[k] * t.recon_dual[k];
        }
    }
    v
}

fn perturb<R: Rng>(r: &mut R, q: &[f64], i: usize) -> Vec<f64> {
    let k = q.len();
    let raw: Vec<f64> = if i.is_multiple_of(2) {
        // Convex move toward a uniform-Dirichlet draw.
        let e: Vec<f64> = (0..k).map(|_| -r.random::<f64>().max(1e-300).ln()).collect();
        let s: f64 = e.iter().sum();
        let t = r.random::<f64>().powi(3);
        q.iter().zip(&e).map(|(a, b)| (1.0 - t) * a + t * b / s).collect()
    } else {
        // Multiplicative log-space jitter.
        let sigma = 10f64.powf(r.random_range(-4.0..0.5));
        q.iter()
            .map(|a| a * (sigma * r.sample::<f64, _>(StandardNormal)).exp())
            .collect()
    };
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn criterion_3() -> (Outcome, String) {
    let mut r = rng(303);
    let (mut base_viol, mut uni_viol, mut uni_no_recon_viol) = (0usize, 0usize, 0usize);
    let (mut base_gap, mut uni_gap, mut nr_gap) = (0.0f64, 0.0f64, 0.0f64);
    let mut uni_configs_violated = 0usize;
    for _ in 0..C3_CONFIGS {
        let d = r.random_range(1..=3);
        let k = r.random_range(2..=6);
        let t2 = 2 * r.random_range(2..=5);
        let s_dim = r.random_range(2..=4);
        let m = linear_decoder_model(&mut r, d, k, t2, s_dim);
        let x: Vec<f64> = normals(&mut r, t2).iter().map(|v| 3.0 * v).collect();
        let s = normals(&mut r, s_dim);
        let qz = m.encode_x(&x).unwrap();
        let comps = m.mixture.components();
        let dual = m.dual_encode_all(&s).unwrap();
        let terms = Terms {
            log_prior: m.log_prior_y(&s).unwrap(),
            kl_z: comps.iter().map(|c| kl_diag(&qz, c).unwrap()).collect(),
            kl_dual: dual.iter().zip(&comps).map(|(q, c)| kl_diag(q, c).unwrap()).collect(),
            recon_dual: dual.iter().map(|q| expected_recon_linear(&m, q, &x)).collect(),
        };
        let q_base = m.compute_qy_base(&x, &s).unwrap();
        let q_uni = m.compute_qy_unified(&x, &s).unwrap();
        let fb = base_objective(&terms, q_base.probs());
        let fu = unified_objective(&terms, q_uni.probs(), true);
        let fnr = unified_objective(&terms, q_uni.probs(), false);
        let mut this_uni = 0usize;
        for i in 0..C3_PERTURBATIONS {
            let pb = perturb(&mut r, q_base.probs(), i);
            let g = base_objective(&terms, &pb) - fb;
            base_gap = base_gap.max(g);
            base_viol += (g > C3_SLACK) as usize;
            let pu = perturb(&mut r, q_uni.probs(), i);
            let g = unified_objective(&terms, &pu, true) - fu;
            uni_gap = uni_gap.max(g);
            this_uni += (g > C3_SLACK) as usize;
            let g = unified_objective(&terms, &pu, false) - fnr;
            nr_gap = nr_gap.max(g);
            uni_no_recon_viol += (g > C3_SLACK) as usize;
        }
        uni_viol += this_uni;
        uni_configs_violated += (this_uni > 0) as usize;
    }
    let total = C3_CONFIGS * C3_PERTURBATIONS;
    let outcome = Outcome {
        id: 3,
        name: "closed-form q(y|x,s) optimality",
        pass: base_viol == 0 && uni_viol == 0,
        detail: format!(
            "base: {base_viol}/{total} violations (max gain {base_gap:.2e}); unified: {uni_viol}/{total} violations in {uni_configs_violated}/{C3_CONFIGS} configurations (max gain {uni_gap:.2e}); slack {C3_SLACK:.0e}"
        ),
    };
    let note = format!(
        "unified q(y|x,s) against the unified objective without its y-dependent term E_q(z'|y,s)[ln p(x'|z')]: {uni_no_recon_viol}/{total} violations (max gain {nr_gap:.2e})"
    );
    (outcome, note)
}

// ---------------------------------------------------------------- 4

fn log_mean_exp(v: &[f64]) -> (f64, f64) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = v.iter().map(|a| (a - max).exp()).collect();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // Delta method: SE of ln(mean) is SE(mean) / mean.
    (max + mean.ln(), (var / n).sqrt() / mean)
}

fn criterion_4() -> Outcome {
    let mut r = rng(404);
    let mut ok = true;
    let mut worst_margin = f64::INFINITY;
    let mut detail = String::new();
    // Probabilists' 3-point Gauss-Hermite rule, exact to degree 5.
    let nodes = [-(3f64.sqrt()), 0.0, 3f64.sqrt()];
    let weights = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];
    for mi in 0..C4_MODELS {
        let d = r.random_range(1..=2);
        let k = r.random_range(2..=4);
        let m = linear_decoder_model(&mut r, d, k, 6, 3);
        let x: Vec<f64> = normals(&mut r, 6).iter().map(|v| 1.5 * v).collect();
        let s = normals(&mut r, 3);
        let qz = m.encode_x(&x).unwrap();
        let qy = m.compute_qy_base(&x, &s).unwrap();
        let log_p = m.log_prior_y(&s).unwrap();
        let comps = m.mixture.components();
        // Tensor-grid quadrature of E_q(z|x) ln p(x|z).
        let mut recon = 0.0;
        let sd: Vec<f64> = qz.std_devs().collect();
        for idx in 0..3usize.pow(d as u32) {
            let mut z = qz.mean().to_vec();
            let mut w = 1.0;
            let mut rest = idx;
            for dd in 0..d {
                z[dd] += sd[dd] * nodes[rest % 3];
                w *= weights[rest % 3];
                rest /= 3;
            }
            recon += w * log_pdf_identity_cov(&m.decode_z(&LatentPoint(z)).unwrap(), &x).unwrap();
        }
        let elbo = recon
            - qy.kl_to_log(&log_p)
            - qy.probs()
                .iter()
                .zip(&comps)
                .map(|(q, c)| q * kl_diag(&qz, c).unwrap())
                .sum::<f64>();
        // Importance sampling with proposal q(y|x,s) q(z|x).
        let mut lw = Vec::with_capacity(C4_DRAWS);
        let cum: Vec<f64> = qy
            .probs()
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        let log_n = |z: &[f64], g: &DiagGaussian| -> f64 {
            z.iter()
                .zip(g.mean().iter().zip(g.log_var()))
                .map(|(zi, (mu, lv))| -0.5 * (LN_2PI + lv + (zi - mu).powi(2) / lv.exp()))
                .sum()
        };
        for _ in 0..C4_DRAWS {
            let u: f64 = r.random();
            let y = cum.iter().position(|c| u < *c).unwrap_or(k - 1);
            let eps = normals(&mut r, d);
            let z: Vec<f64> = qz
                .mean()
                .iter()
                .zip(&sd)
                .zip(&eps)
                .map(|((m_, s_), e)| m_ + s_ * e)
                .collect();
            let lx = log_pdf_identity_cov(&m.decode_z(&LatentPoint(z.clone())).unwrap(), &x).unwrap();
            lw.push(log_p[y] + log_n(&z, &comps[y]) + lx - qy.probs()[y].ln() - log_n(&z, &qz));
        }
        let (log_px, se) = log_mean_exp(&lw);
        let margin = log_px + C4_SIGMAS * se - elbo;
        worst_margin = worst_margin.min(margin);
        if margin < 0.0 {
            ok = false;
            detail = format!("model {mi}: ELBO {elbo:.4} > ln p(x|s) {log_px:.4} + {C4_SIGMAS}·{se:.2e}");
        }
    }
    Outcome {
        id: 4,
        name: "bound property (ELBO <= importance-sampled ln p(x|s))",
        pass: ok,
        detail: if ok {
            format!("{C4_MODELS} linear-decoder models, {C4_DRAWS} draws each; smallest margin ln p + {C4_SIGMAS}SE - ELBO = {worst_margin:.3e}")
        } else {
            detail
        },
    }
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut r = rng(505);
    let mut worst: f64 = 0.0;
    let mut modes_equal = true;
    for _ in 0..50 {
        let mut m = tiny_model(&mut r);
        m.pin_dual_to_priors();
        let x = normals(&mut r, m.config.traj_dim);
        let s = normals(&mut r, m.config.scenario_dim);
        let a = m.compute_qy_base(&x, &s).unwrap();
        let b = m.compute_qy_unified(&x, &s).unwrap();
        for (p, q) in a.probs().iter().zip(b.probs()) {
            worst = worst.max((p - q).abs());
        }
        let pp = predict(&m, &s, PredictionMode::Prior, 0.0).unwrap();
        let pq = predict(&m, &s, PredictionMode::Posterior, 0.0).unwrap();
        modes_equal &= pp.actions.len() == pq.actions.len()
            && pp
                .actions
                .iter()
                .zip(&pq.actions)
                .all(|(u, v)| u.action == v.action && u.sigma_trajectories == v.sigma_trajectories);
    }
    Outcome {
        id: 5,
        name: "reduction identity with pinned dual heads",
        pass: worst <= C5_TOL && modes_equal,
        detail: format!("50 models: max |q_unified - q_base| {worst:.2e} (tol {C5_TOL:.0e}); prior/posterior predictions identical: {modes_equal}"),
    }
}

// ---------------------------------------------------------------- 6-9

fn criterion_6(run: &PipelineRun) -> Outcome {
    let m = &run.metrics;
    let secs = run.total_time().as_secs_f64();
    Outcome {
        id: 6,
        name: "fixture recovery",
        pass: (C6_MIN_ACTIONS..=C6_MAX_ACTIONS).contains(&m.effective_actions) && m.nmi >= C6_MIN_NMI && secs < C6_MAX_SECS,
        detail: format!(
            "effective actions {} (want {C6_MIN_ACTIONS}..={C6_MAX_ACTIONS}), nmi {:.3} (min {C6_MIN_NMI}), purity {:.3}, pipeline {:.0}s (limit {:.0}s)",
            m.effective_actions, m.nmi, m.purity, secs, C6_MAX_SECS
        ),
    }
}

fn criterion_7(run: &PipelineRun) -> Outcome {
    let m = &run.metrics;
    Outcome {
        id: 7,
        name: "conditioning gain",
        pass: m.min_ade_posterior <= C7_RATIO * m.min_ade_prior && m.fan_spread_posterior < m.fan_spread_prior,
        detail: format!(
            "minADE@{} posterior {:.3} m vs prior {:.3} m (ratio {:.3}, max {C7_RATIO}); fan spread posterior {:.3} vs prior {:.3}",
            m.top_m,
            m.min_ade_posterior,
            m.min_ade_prior,
            m.min_ade_posterior / m.min_ade_prior,
            m.fan_spread_posterior,
            m.fan_spread_prior
        ),
    }
}

fn criterion_8(a: &PipelineRun, b: &PipelineRun) -> Outcome {
    let same_ckpt = a.checkpoints.len() == b.checkpoints.len()
        && a.checkpoints
            .iter()
            .zip(&b.checkpoints)
            .all(|(x, y)| x.to_bytes() == y.to_bytes());
    let same_metrics = a.metrics.to_toml() == b.metrics.to_toml();
    Outcome {
        id: 8,
        name: "determinism",
        pass: same_ckpt && same_metrics,
        detail: format!(
            "{} checkpoints bitwise identical: {same_ckpt}; metric reports identical: {same_metrics}",
            a.checkpoints.len()
        ),
    }
}

fn block_hashes(m: &ModelState) -> Vec<(String, [u8; 32])> {
    m.named_blocks()
        .into_iter()
        .chain(m.norm_blocks())
        .map(|(n, b)| {
            let mut h = Sha256::new();
            for v in b {
                h.update(v.to_le_bytes());
            }
            (n, h.finalize().into())
        })
        .collect()
}

fn criterion_9(run: &PipelineRun) -> Outcome {
    let before = block_hashes(&run.checkpoint(StageMarker::Base).unwrap().model);
    let after = block_hashes(&run.checkpoint(StageMarker::Dual).unwrap().model);
    let mut frozen = 0usize;
    let mut changed = Vec::new();
    let mut dual_changed = 0usize;
    for ((name, h0), (_, h1)) in before.iter().zip(&after) {
        if name.starts_with("dual.") {
            dual_changed += (h0 != h1) as usize;
        } else {
            frozen += 1;
            if h0 != h1 {
                changed.push(name.clone());
            }
        }
    }
    Outcome {
        id: 9,
        name: "freeze contract",
        pass: changed.is_empty(),
        detail: format!(
            "{frozen} non-dual blocks, {} changed {:?}; {dual_changed} dual blocks updated",
            changed.len(),
            changed
        ),
    }
}

fn print(o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let known = if !o.pass && KNOWN_UNATTAINABLE.contains(&o.id) {
        " [known unattainable]"
    } else {
        ""
    };
    println!("[{tag}] {}. {}: {}{known}", o.id, o.name, o.detail);
}

fn main() -> ExitCode {
    // Optional criterion numbers on the command line restrict the run.
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: u32| selected.is_empty() || selected.contains(&id);
    let mut outcomes = Vec::new();
    let run_and_print = |o: Outcome, outcomes: &mut Vec<Outcome>| {
        print(&o);
        outcomes.push(o);
    };
    if want(1) {
        run_and_print(criterion_1(), &mut outcomes);
    }
    if want(2) {
        run_and_print(criterion_2(), &mut outcomes);
    }
    if want(3) {
        let (c3, note) = criterion_3();
        run_and_print(c3, &mut outcomes);
        println!("       note: {note}");
    }
    if want(4) {
        run_and_print(criterion_4(), &mut outcomes);
    }
    if want(5) {
        run_and_print(criterion_5(), &mut outcomes);
    }
    if ![6, 7, 8, 9].iter().any(|i| want(*i)) {
        return finish(&outcomes);
    }

    let cfg = PipelineConfig::default();
    let first = run_pipeline(&cfg, false);
    let second = run_pipeline(&cfg, false);
    match (&first, &second) {
        (Ok(a), Ok(b)) => {
            run_and_print(criterion_6(a), &mut outcomes);
            run_and_print(criterion_7(a), &mut outcomes);
            run_and_print(criterion_8(a, b), &mut outcomes);
            run_and_print(criterion_9(a), &mut outcomes);
            let timings: Vec<String> = a
                .timings
                .iter()
                .map(|(n, t)| format!("{n} {:.0}s", t.as_secs_f64()))
                .collect();
            println!("       pipeline stages: {}", timings.join(", "));
            println!("       pretraining held-out reconstruction ADE: {:.3} m", a.holdout_ade);
            let base: Vec<f64> = a.logs.iter().filter(|l| l.stage == "base").map(|l| l.total).collect();
            let sm = smoothed(&base, 10);
            let half = &sm[sm.len() / 2..];
            let drops = half.windows(2).filter(|w| w[1] < w[0]).count();
            println!(
                "       base objective (10-epoch smoothed) over final half: {:.3} -> {:.3}, {drops} decreasing steps",
                half[0],
                half[half.len() - 1]
            );
        }
        _ => {
            let err = first.as_ref().err().or(second.as_ref().err()).unwrap();
            for (id, name) in [
                (6, "fixture recovery"),
                (7, "conditioning gain"),
                (8, "determinism"),
                (9, "freeze contract"),
            ] {
                run_and_print(
                    Outcome {
                        id,
                        name,
                        pass: false,
                        detail: format!("pipeline failed: {err}"),
                    },
                    &mut outcomes,
                );
            }
        }
    }

    finish(&outcomes)
}

fn finish(outcomes: &[Outcome]) -> ExitCode {
    let passed = outcomes.iter().filter(|o| o.pass).count();
    let unexpected: Vec<u32> = outcomes
        .iter()
        .filter(|o| !o.pass && !KNOWN_UNATTAINABLE.contains(&o.id))
        .map(|o| o.id)
        .collect();
    println!("acceptance: {passed}/{} criteria passed", outcomes.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
