//! Prediction, accuracy and clustering metrics, and plot export.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussmath::{sigma_points, DiagGaussian, LatentPoint};
use crate::model::ModelState;
use crate::objectives::{evaluate, EvalOptions, Noise, ObjectiveKind};
use crate::synthdata::{LabeledSample, RoadLayout};
use crate::training::{stream_rng, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Decode the mixture component `p(z|y)`.
    Prior,
    /// Decode the scenario-conditioned `q(z|y,s)`.
    Posterior,
}

impl PredictionMode {
    pub fn name(self) -> &'static str {
        match self {
            PredictionMode::Prior => "prior",
            PredictionMode::Posterior => "posterior",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionPrediction {
    pub action: usize,
    pub probability: f64,
    /// Decoded latent mean (equal to `sigma_trajectories[0]`).
    pub mean: Vec<f64>,
    /// Decoded sigma points: mean first, then `+σ`/`−σ` per latent dimension.
    pub sigma_trajectories: Vec<Vec<f64>>,
    pub source: PredictionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mode: PredictionMode,
    /// Actions above the threshold, most probable first.
    pub actions: Vec<ActionPrediction>,
}

fn ensure_finite(m: &ModelState) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(Error::ModelState("model parameters contain non-finite values".into()))
    }
}

fn latent_for(m: &ModelState, s: &[f64], k: usize, mode: PredictionMode) -> Result<DiagGaussian> {
    match mode {
        PredictionMode::Prior => m.mixture_component(k),
        PredictionMode::Posterior => m.dual_encode(s, k),
    }
}

/// Decode every sigma point of `g`.
pub fn decode_fan(m: &ModelState, g: &DiagGaussian) -> Result<Vec<Vec<f64>>> {
    sigma_points(g).iter().map(|z| m.decode_z(z)).collect()
}

/// Actions with `p(y|s) > threshold` and their decoded sigma fans.
pub fn predict(m: &ModelState, s: &[f64], mode: PredictionMode, threshold: f64) -> Result<Prediction> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Contract(format!("threshold {threshold} outside [0, 1)")));
    }
    ensure_finite(m)?;
    let p = m.prior_y(s)?;
    let mut actions = Vec::new();
    for k in p.ranked() {
        let prob = p.probs()[k];
        if prob <= threshold {
            continue;
        }
        let fan = decode_fan(m, &latent_for(m, s, k, mode)?)?;
        actions.push(ActionPrediction {
            action: k,
            probability: prob,
            mean: fan[0].clone(),
            sigma_trajectories: fan,
            source: mode,
        });
    }
    Ok(Prediction { mode, actions })
}

/// Actions whose `p(y|s)` exceeds `threshold` for at least one scenario.
pub fn effective_actions<'a>(
    m: &ModelState,
    scenarios: impl IntoIterator<Item = &'a [f64]>,
    threshold: f64,
) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for s in scenarios {
        let p = m.prior_y(s)?;
        out.extend(
            p.probs()
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > threshold)
                .map(|(k, _)| k),
        );
    }
    Ok(out)
}

/// Mean per-waypoint Euclidean distance between two flattened trajectories.
pub fn ade(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() / 2;
    if n == 0 {
        return 0.0;
    }
    a.chunks_exact(2)
        .zip(b.chunks_exact(2))
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterAgreement {
    pub nmi: f64,
    pub purity: f64,
    /// Every sample landed in one cluster (or carries one label).
    pub degenerate: bool,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|c| *c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// NMI (arithmetic-mean normalization) and purity of `assignments` against `labels`.
pub fn agreement(assignments: &[usize], labels: &[usize]) -> Result<ClusterAgreement> {
    crate::error::check_dim("cluster labels", assignments.len(), labels.len())?;
    if assignments.is_empty() {
        return Err(Error::Contract("cluster agreement needs at least one sample".into()));
    }
    let n = assignments.len() as f64;
    let ka = assignments.iter().max().unwrap() + 1;
    let kl = labels.iter().max().unwrap() + 1;
    let mut joint = vec![0usize; ka * kl];
    for (a, l) in assignments.iter().zip(labels) {
        joint[a * kl + l] += 1;
    }
    let row = |a: usize| joint[a * kl..(a + 1) * kl].iter().sum::<usize>();
    let col = |l: usize| (0..ka).map(|a| joint[a * kl + l]).sum::<usize>();
    let rows: Vec<usize> = (0..ka).map(row).collect();
    let cols: Vec<usize> = (0..kl).map(col).collect();
    let h_a = entropy(rows.iter().copied(), n);
    let h_l = entropy(cols.iter().copied(), n);
    let mut mi = 0.0;
    for a in 0..ka {
        for l in 0..kl {
            let c = joint[a * kl + l];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (rows[a] as f64 * cols[l] as f64)).ln();
            }
        }
    }
    let denom = 0.5 * (h_a + h_l);
    let nmi = if denom > 0.0 { (mi / denom).clamp(0.0, 1.0) } else { 0.0 };
    let purity = (0..ka)
        .map(|a| joint[a * kl..(a + 1) * kl].iter().copied().max().unwrap_or(0))
        .sum::<usize>() as f64
        / n;
    let used = rows.iter().filter(|r| **r > 0).count();
    let labels_used = cols.iter().filter(|c| **c > 0).count();
    Ok(ClusterAgreement {
        nmi,
        purity,
        degenerate: used < 2 || labels_used < 2,
    })
}

/// Which discrete posterior assigns samples to actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    Base,
    Unified,
}

pub fn assignments(m: &ModelState, samples: &[LabeledSample], kind: PosteriorKind) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            let q = match kind {
                PosteriorKind::Base => m.compute_qy_base(s.trajectory.as_slice(), s.scenario.as_slice())?,
                PosteriorKind::Unified => m.compute_qy_unified(s.trajectory.as_slice(), s.scenario.as_slice())?,
            };
            Ok(q.argmax())
        })
        .collect()
}

/// Agreement of argmax posterior assignments with the generator labels.
pub fn cluster_agreement(m: &ModelState, samples: &[LabeledSample], kind: PosteriorKind) -> Result<ClusterAgreement> {
    let a = assignments(m, samples, kind)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.hidden_label).collect();
    agreement(&a, &labels)
}

/// Sample-averaged best ADE among the decoded means of the `top_m` most
/// probable actions.
pub fn min_ade(m: &ModelState, samples: &[LabeledSample], mode: PredictionMode, top_m: usize) -> Result<f64> {
    if top_m == 0 || top_m > m.num_actions() {
        return Err(Error::Contract(format!(
            "top_m = {top_m} must lie in 1..={}",
            m.num_actions()
        )));
    }
    if samples.is_empty() {
        return Ok(0.0);
    }
    ensure_finite(m)?;
    let prior_means: Vec<Vec<f64>> = if mode == PredictionMode::Prior {
        (0..m.num_actions())
            .map(|k| m.decode_z(&LatentPoint(m.mixture_component(k)?.mean().to_vec())))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut total = 0.0;
    for s in samples {
        let sc = s.scenario.as_slice();
        let ranked = m.prior_y(sc)?.ranked();
        let mut best = f64::INFINITY;
        for &k in &ranked[..top_m] {
            let mean = match mode {
                PredictionMode::Prior => prior_means[k].clone(),
                PredictionMode::Posterior => m.decode_z(&LatentPoint(m.dual_encode(sc, k)?.mean().to_vec()))?,
            };
            best = best.min(ade(&mean, s.trajectory.as_slice()));
        }
        total += best;
    }
    Ok(total / samples.len() as f64)
}

/// Mean pairwise ADE among the sigma trajectories of each action, averaged over actions.
pub fn fan_spread(p: &Prediction) -> f64 {
    if p.actions.is_empty() {
        return 0.0;
    }
    let per_action = p.actions.iter().map(|a| {
        let fan = &a.sigma_trajectories;
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..fan.len() {
            for j in i + 1..fan.len() {
                sum += ade(&fan[i], &fan[j]);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    });
    per_action.sum::<f64>() / p.actions.len() as f64
}

/// Scenario-averaged fan spread in one mode.
pub fn mean_fan_spread(m: &ModelState, samples: &[LabeledSample], mode: PredictionMode, threshold: f64) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        total += fan_spread(&predict(m, s.scenario.as_slice(), mode, threshold)?);
    }
    Ok(total / samples.len() as f64)
}

/// Dataset-mean objective, each sample averaged over `n_noise` draws.
pub fn holdout_elbo(
    m: &ModelState,
    kind: ObjectiveKind,
    samples: &[LabeledSample],
    n_noise: usize,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() || n_noise == 0 {
        return Ok(0.0);
    }
    let mut rng = stream_rng(seed, RngStream::Evaluation);
    let (d, k) = (m.latent_dim(), m.num_actions());
    let dual = matches!(kind, ObjectiveKind::Dual | ObjectiveKind::Unified);
    let mut total = 0.0;
    for s in samples {
        let mut acc = 0.0;
        for _ in 0..n_noise {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let per_action = if dual {
                (0..k)
                    .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
                    .collect()
            } else {
                Vec::new()
            };
            let noise = Noise { z, per_action };
            let r = evaluate(
                m,
                kind,
                s.trajectory.as_slice(),
                s.scenario.as_slice(),
                &noise,
                &EvalOptions::default(),
                None,
            )?;
            acc += r.total;
        }
        total += acc / n_noise as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Every mixture component decoded as a prior fan, labeled with `probs`
/// (or uniform when absent).
pub fn action_set(m: &ModelState, probs: Option<&[f64]>) -> Result<Vec<ActionPrediction>> {
    ensure_finite(m)?;
    let k = m.num_actions();
    (0..k)
        .map(|a| {
            let fan = decode_fan(m, &m.mixture_component(a)?)?;
            Ok(ActionPrediction {
                action: a,
                probability: probs.map_or(1.0 / k as f64, |p| p[a]),
                mean: fan[0].clone(),
                sigma_trajectories: fan,
                source: PredictionMode::Prior,
            })
        })
        .collect()
}

/// Average `p(y|s)` over the given scenarios.
pub fn marginal_action_probs<'a>(m: &ModelState, scenarios: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; m.num_actions()];
    let mut n = 0usize;
    for s in scenarios {
        for (a, p) in acc.iter_mut().zip(m.prior_y(s)?.probs()) {
            *a += p;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    Ok(acc)
}

/// `action,sigma_index,t,x,y,probability`, one row per waypoint per sigma trajectory.
pub fn actions_csv(actions: &[ActionPrediction]) -> String {
    let mut out = String::from("action,sigma_index,t,x,y,probability\n");
    for a in actions {
        for (si, traj) in a.sigma_trajectories.iter().enumerate() {
            for (t, p) in traj.chunks_exact(2).enumerate() {
                writeln!(
                    out,
                    "{},{},{},{:.6},{:.6},{:.6}",
                    a.action,
                    si,
                    t + 1,
                    p[0],
                    p[1],
                    a.probability
                )
                .unwrap();
            }
        }
    }
    out
}

/// One plot panel: a set of action fans plus an optional ground truth.
#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub actions: Vec<ActionPrediction>,
    pub ground_truth: Option<Vec<f64>>,
}

const PANEL: f64 = 240.0;
const PAD: f64 = 16.0;

fn hue(action: usize) -> String {
    let h = (action * 137) % 360;
    format!("hsl({h},70%,45%)")
}

fn polyline(points: &[f64], map: &impl Fn(f64, f64) -> (f64, f64)) -> String {
    let (x0, y0) = map(0.0, 0.0);
    let mut s = format!("{x0:.2},{y0:.2}");
    for p in points.chunks_exact(2) {
        let (x, y) = map(p[0], p[1]);
        write!(s, " {x:.2},{y:.2}").unwrap();
    }
    s
}

/// Standalone SVG, panels laid out in a near-square grid. Means are black,
/// sigma trajectories use a per-action hue, ground truth is dashed red.
pub fn render_svg(panels: &[Panel]) -> String {
    let cols = (panels.len() as f64).sqrt().ceil().max(1.0) as usize;
    let rows = panels.len().div_ceil(cols).max(1);
    let (w, h) = (cols as f64 * PANEL, rows as f64 * (PANEL + PAD));
    let mut out = String::new();
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">"
    )
    .unwrap();
    writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").unwrap();
    for (i, panel) in panels.iter().enumerate() {
        let (ox, oy) = ((i % cols) as f64 * PANEL, (i / cols) as f64 * (PANEL + PAD));
        let mut xs = vec![0.0];
        let mut ys = vec![0.0];
        let all = panel
            .actions
            .iter()
            .flat_map(|a| a.sigma_trajectories.iter())
            .chain(panel.ground_truth.iter());
        for t in all {
            for p in t.chunks_exact(2) {
                xs.push(p[0]);
                ys.push(p[1]);
            }
        }
        let (xmin, xmax) = (
            xs.iter().copied().fold(f64::INFINITY, f64::min),
            xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        );
        let (ymin, ymax) = (
            ys.iter().copied().fold(f64::INFINITY, f64::min),
            ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        );
        let span = (xmax - xmin).max(ymax - ymin).max(1.0);
        let scale = (PANEL - 2.0 * PAD) / span;
        let (cx, cy) = (0.5 * (xmin + xmax), 0.5 * (ymin + ymax));
        let map = move |x: f64, y: f64| {
            (
                ox + PANEL / 2.0 + (x - cx) * scale,
                oy + PAD + (PANEL - PAD) / 2.0 - (y - cy) * scale,
            )
        };
        writeln!(out, "<g>").unwrap();
        writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            ox + 4.0,
            oy + 12.0,
            panel.title
        )
        .unwrap();
        for a in &panel.actions {
            let color = hue(a.action);
            for t in a.sigma_trajectories.iter().skip(1) {
                writeln!(
                    out,
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1\" points=\"{}\"/>",
                    polyline(t, &map)
                )
                .unwrap();
            }
        }
        for a in &panel.actions {
            writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"1.5\" points=\"{}\"/>",
                polyline(&a.mean, &map)
            )
            .unwrap();
        }
        if let Some(gt) = &panel.ground_truth {
            writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"#d00000\" stroke-width=\"1.5\" stroke-dasharray=\"4 3\" points=\"{}\"/>",
                polyline(gt, &map)
            )
            .unwrap();
        }
        writeln!(out, "</g>").unwrap();
    }
    out.push_str("</svg>\n");
    out
}

/// Write `<stem>.csv` and `<stem>.svg` into `dir`.
pub fn export_plots(dir: &Path, stem: &str, panels: &[Panel]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let actions: Vec<ActionPrediction> = panels.iter().flat_map(|p| p.actions.iter().cloned()).collect();
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, actions_csv(&actions)).map_err(|e| Error::io(&csv, e))?;
    let svg = dir.join(format!("{stem}.svg"));
    fs::write(&svg, render_svg(panels)).map_err(|e| Error::io(&svg, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub threshold: f64,
    pub effective_actions: usize,
    pub effective_action_indices: Vec<usize>,
    pub assignment_posterior: PosteriorKind,
    pub nmi: f64,
    pub purity: f64,
    pub degenerate_assignment: bool,
    pub top_m: usize,
    pub min_ade_prior: f64,
    pub min_ade_posterior: f64,
    pub fan_spread_prior: f64,
    pub fan_spread_posterior: f64,
    /// Mean number of actions above threshold on intersection-like layouts.
    pub mean_actions_at_intersections: f64,
    pub holdout_objective: f64,
    pub holdout_objective_kind: ObjectiveKind,
}

impl MetricsReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metrics serialize")
    }
}

#[derive(Debug, Clone)]
pub struct MetricsOptions {
    pub threshold: f64,
    pub top_m: usize,
    pub posterior: PosteriorKind,
    pub objective: ObjectiveKind,
    pub n_noise: usize,
    pub seed: u64,
}

/// The full metrics suite over a labeled (held-out) set.
pub fn metrics(m: &ModelState, samples: &[LabeledSample], opts: &MetricsOptions) -> Result<MetricsReport> {
    let scen = || samples.iter().map(|s| s.scenario.as_slice());
    let eff = effective_actions(m, scen(), opts.threshold)?;
    let agree = cluster_agreement(m, samples, opts.posterior)?;
    let mut inter = 0usize;
    let mut inter_actions = 0usize;
    for s in samples {
        if matches!(
            s.scenario.layout(),
            Some(RoadLayout::FourWay | RoadLayout::ThreeWay | RoadLayout::TurnLane)
        ) {
            inter += 1;
            inter_actions += m
                .prior_y(s.scenario.as_slice())?
                .probs()
                .iter()
                .filter(|p| **p > opts.threshold)
                .count();
        }
    }
    Ok(MetricsReport {
        n_samples: samples.len(),
        threshold: opts.threshold,
        effective_actions: eff.len(),
        effective_action_indices: eff.into_iter().collect(),
        assignment_posterior: opts.posterior,
        nmi: agree.nmi,
        purity: agree.purity,
        degenerate_assignment: agree.degenerate,
        top_m: opts.top_m,
        min_ade_prior: min_ade(m, samples, PredictionMode::Prior, opts.top_m)?,
        min_ade_posterior: min_ade(m, samples, PredictionMode::Posterior, opts.top_m)?,
        fan_spread_prior: mean_fan_spread(m, samples, PredictionMode::Prior, opts.threshold)?,
        fan_spread_posterior: mean_fan_spread(m, samples, PredictionMode::Posterior, opts.threshold)?,
        mean_actions_at_intersections: if inter > 0 {
            inter_actions as f64 / inter as f64
        } else {
            0.0
        },
        holdout_objective: holdout_elbo(m, opts.objective, samples, opts.n_noise, opts.seed)?,
        holdout_objective_kind: opts.objective,
    })
}
