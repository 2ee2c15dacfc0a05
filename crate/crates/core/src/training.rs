//! Staged optimization: VAE pretraining, mixture initialization by k-means,
//! then base, dual or unified training.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussmath::{DiagGaussian, LatentPoint};
use crate::model::{Affine, ModelConfig, ModelState, ParamGroup};
use crate::neuralnet::{AdamConfig, AdamState, BlockUpdate};
use crate::objectives::{evaluate, EvalOptions, Noise, ObjectiveKind, ObjectiveReport};
use crate::synthdata::{TrainingSample, SCENARIO_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Dual,
    Unified,
}

impl Stage {
    pub fn objective(self) -> ObjectiveKind {
        match self {
            Stage::Base => ObjectiveKind::Base,
            Stage::Dual => ObjectiveKind::Dual,
            Stage::Unified => ObjectiveKind::Unified,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Dual => "dual",
            Stage::Unified => "unified",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Independent random streams, one per purpose, all derived from the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum RngStream {
    Params = 1,
    Pretrain = 2,
    KMeans = 3,
    Base = 4,
    Dual = 5,
    Unified = 6,
    Evaluation = 7,
    Monitor = 8,
}

pub fn stream_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub num_actions: usize,
    pub latent_dim: usize,
    pub horizon: usize,
    pub scenario_dim: usize,
    pub hidden: Vec<usize>,
    pub dual_head_hidden: Vec<usize>,
    pub shared_dual_trunk: bool,
    pub classifier_on_trunk: bool,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub base_epochs: usize,
    pub dual_epochs: usize,
    pub unified_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub stage: Stage,
    pub init_sample_count: usize,
    pub kmeans_iterations: usize,
    pub action_threshold: f64,
    /// Held-out reconstruction ADE (m) pretraining must reach.
    pub ade_gate: f64,
    pub enforce_ade_gate: bool,
    /// Dual-encoder noise draws per action and sample.
    pub dual_noise_samples: usize,
    /// Scale applied to dual-head output weights when seeding them from the priors.
    pub dual_seed_scale: f64,
    /// Hold dual heads at their prior components (no head updates).
    pub pin_dual_heads: bool,
    /// Samples scored with fixed noise after every epoch.
    pub monitor_samples: usize,
    pub early_stop: bool,
    pub smoothing_window: usize,
    pub patience: usize,
    pub min_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_actions: 12,
            latent_dim: 3,
            horizon: 30,
            scenario_dim: SCENARIO_DIM,
            hidden: vec![64],
            dual_head_hidden: Vec::new(),
            shared_dual_trunk: true,
            classifier_on_trunk: false,
            batch_size: 64,
            pretrain_epochs: 30,
            base_epochs: 40,
            dual_epochs: 30,
            unified_epochs: 40,
            learning_rate: 1e-3,
            seed: 13,
            stage: Stage::Base,
            init_sample_count: 4096,
            kmeans_iterations: 50,
            action_threshold: 0.05,
            ade_gate: 0.5,
            enforce_ade_gate: true,
            dual_noise_samples: 1,
            dual_seed_scale: 0.1,
            pin_dual_heads: false,
            monitor_samples: 1024,
            early_stop: true,
            smoothing_window: 10,
            patience: 20,
            min_improvement: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_actions < 2 {
            return Err(Error::Config("num_actions must be at least 2".into()));
        }
        if self.batch_size == 0 || self.dual_noise_samples == 0 || self.smoothing_window == 0 {
            return Err(Error::Config(
                "batch_size, dual_noise_samples and smoothing_window must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.action_threshold) {
            return Err(Error::Config("action_threshold must lie in [0, 1)".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            traj_dim: 2 * self.horizon,
            scenario_dim: self.scenario_dim,
            latent_dim: self.latent_dim,
            num_actions: self.num_actions,
            hidden: self.hidden.clone(),
            dual_head_hidden: self.dual_head_hidden.clone(),
            shared_dual_trunk: self.shared_dual_trunk,
            classifier_on_trunk: self.classifier_on_trunk,
        }
    }

    fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Base => self.base_epochs,
            Stage::Dual => self.dual_epochs,
            Stage::Unified => self.unified_epochs,
        }
    }

    fn adam(&self) -> AdamState {
        AdamState::new(AdamConfig {
            learning_rate: self.learning_rate,
            ..Default::default()
        })
    }
}

/// Per-epoch means of the objective terms on the monitor set.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: String,
    pub total: f64,
    pub recon_x: f64,
    pub recon_x_prime: f64,
    pub kl_y: f64,
    pub kl_z: f64,
    pub kl_z_prime: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,stage,total,recon_x,recon_x_prime,kl_y,kl_z,kl_z_prime";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
            self.epoch, self.stage, self.total, self.recon_x, self.recon_x_prime, self.kl_y, self.kl_z, self.kl_z_prime
        )
    }
}

/// Write a stage log, replacing any earlier log of the same stage.
pub fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut out = String::from(EpochRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Mean of `window` trailing values at every position (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn should_stop(cfg: &TrainConfig, totals: &[f64]) -> bool {
    if !cfg.early_stop || totals.len() <= cfg.patience + cfg.smoothing_window {
        return false;
    }
    let s = smoothed(totals, cfg.smoothing_window);
    let n = s.len();
    s[n - 1] - s[n - 1 - cfg.patience] < cfg.min_improvement
}

fn check_data(cfg: &TrainConfig, data: &[TrainingSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Contract("training data is empty".into()));
    }
    for s in data {
        crate::error::check_dim("trajectory", 2 * cfg.horizon, s.trajectory.len())?;
        crate::error::check_dim("scenario", cfg.scenario_dim, s.scenario.len())?;
        if let Some(k) = s.known_action {
            crate::error::check_index("known_action", k, cfg.num_actions)?;
        }
    }
    Ok(())
}

fn standard_normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn draw_noise<R: Rng>(rng: &mut R, kind: ObjectiveKind, dim: usize, k: usize, n_dual: usize) -> Noise {
    let z = standard_normals(rng, dim);
    let per_action = if matches!(kind, ObjectiveKind::Dual | ObjectiveKind::Unified) {
        (0..k * n_dual).map(|_| standard_normals(rng, dim)).collect()
    } else {
        Vec::new()
    };
    Noise { z, per_action }
}

/// Which trainable blocks a stage updates.
fn block_trainable(name: &str, groups: &[ParamGroup], pin_heads: bool) -> bool {
    if pin_heads && name.starts_with("dual.head") {
        return false;
    }
    ParamGroup::of_block(name).is_some_and(|g| groups.contains(&g))
}

struct Monitor {
    indices: Vec<usize>,
    noise: Vec<Noise>,
}

impl Monitor {
    fn new(cfg: &TrainConfig, kind: ObjectiveKind, n: usize) -> Self {
        let mut rng = stream_rng(cfg.seed, RngStream::Monitor);
        let count = cfg.monitor_samples.min(n).max(1);
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        let mut indices = all[..count].to_vec();
        indices.sort_unstable();
        let noise = indices
            .iter()
            .map(|_| draw_noise(&mut rng, kind, cfg.latent_dim, cfg.num_actions, cfg.dual_noise_samples))
            .collect();
        Self { indices, noise }
    }

    fn record(
        &self,
        m: &ModelState,
        kind: ObjectiveKind,
        data: &[TrainingSample],
        epoch: usize,
        stage: &str,
    ) -> Result<EpochRecord> {
        let mut acc = [0.0; 6];
        for (i, noise) in self.indices.iter().zip(&self.noise) {
            let s = &data[*i];
            let opts = EvalOptions {
                label: s.known_action,
                ..Default::default()
            };
            let r = evaluate(m, kind, &s.trajectory, &s.scenario, noise, &opts, None)?;
            for (a, v) in acc.iter_mut().zip(report_terms(&r)) {
                *a += v;
            }
        }
        let n = self.indices.len() as f64;
        Ok(EpochRecord {
            epoch,
            stage: stage.into(),
            total: acc[0] / n,
            recon_x: acc[1] / n,
            recon_x_prime: acc[2] / n,
            kl_y: acc[3] / n,
            kl_z: acc[4] / n,
            kl_z_prime: acc[5] / n,
        })
    }
}

fn report_terms(r: &ObjectiveReport) -> [f64; 6] {
    [
        r.total,
        r.recon_x,
        r.recon_x_prime,
        r.kl_y,
        r.expected_kl_z,
        r.expected_kl_z_prime,
    ]
}

/// Run `epochs` epochs of minibatch Adam on `kind`, updating only `groups`.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    m: &mut ModelState,
    cfg: &TrainConfig,
    kind: ObjectiveKind,
    groups: &[ParamGroup],
    data: &[TrainingSample],
    epochs: usize,
    stage: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochRecord>> {
    let monitor = Monitor::new(cfg, kind, data.len());
    let mut adam = cfg.adam();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let diverged = |epoch: usize, log: &Vec<EpochRecord>| Error::Divergence {
        stage: stage.to_string(),
        epoch,
        last_finite: log.last().map(|r: &EpochRecord| r.epoch),
    };
    let opts_groups = Some(groups.to_vec());
    for epoch in 1..=epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = m.zero_grad();
            for &i in batch {
                let s = &data[i];
                let noise = draw_noise(rng, kind, cfg.latent_dim, cfg.num_actions, cfg.dual_noise_samples);
                let opts = EvalOptions {
                    label: s.known_action,
                    groups: opts_groups.clone(),
                    ..Default::default()
                };
                match evaluate(m, kind, &s.trajectory, &s.scenario, &noise, &opts, Some(&mut grad)) {
                    Ok(_) => {}
                    Err(e) if e.is_divergence() => return Err(diverged(epoch, &log)),
                    Err(e) => return Err(e),
                }
            }
            // Maximize the bound: Adam minimizes its negation.
            grad.scale(-1.0 / batch.len() as f64);
            let grad_blocks = grad.named_blocks();
            let mut named = m.named_blocks_mut();
            let mut updates: Vec<BlockUpdate<'_>> = named
                .iter_mut()
                .zip(&grad_blocks)
                .filter(|((name, _), _)| block_trainable(name, groups, cfg.pin_dual_heads))
                .map(|((name, params), (_, grads))| BlockUpdate {
                    name: name.as_str(),
                    params,
                    grads,
                })
                .collect();
            match adam.step(&mut updates) {
                Ok(()) => {}
                Err(e) if e.is_divergence() => return Err(diverged(epoch, &log)),
                Err(e) => return Err(e),
            }
        }
        if !m.all_finite() {
            return Err(diverged(epoch, &log));
        }
        let rec = match monitor.record(m, kind, data, epoch, stage) {
            Ok(r) if r.total.is_finite() => r,
            Ok(_) => return Err(diverged(epoch, &log)),
            Err(e) if e.is_divergence() => return Err(diverged(epoch, &log)),
            Err(e) => return Err(e),
        };
        log.push(rec);
        let totals: Vec<f64> = log.iter().map(|r| r.total).collect();
        if should_stop(cfg, &totals) {
            break;
        }
    }
    Ok(log)
}

/// Mean over samples of the mean per-waypoint distance between `x` and the
/// decoded mean of `q(z|x)`.
pub fn reconstruction_ade(m: &ModelState, data: &[TrainingSample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in data {
        let q = m.encode_x(&s.trajectory)?;
        let x_hat = m.decode_z(&LatentPoint(q.mean().to_vec()))?;
        total += crate::evaluation::ade(&x_hat, &s.trajectory);
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub model: ModelState,
    pub log: Vec<EpochRecord>,
    pub holdout_ade: f64,
    pub rng: ChaCha8Rng,
}

/// Fit the normalizers, then train encoder and decoder under the standard
/// single-Gaussian-prior bound.
pub fn pretrain_vae(
    cfg: &TrainConfig,
    train: &[TrainingSample],
    holdout: &[TrainingSample],
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    check_data(cfg, train)?;
    let mut model = ModelState::new(cfg.model_config(), &mut stream_rng(cfg.seed, RngStream::Params))?;
    model.traj_norm = Affine::fit(train.iter().map(|s| &s.trajectory[..]), 2 * cfg.horizon, 1e-2);
    model.scenario_norm = Affine::fit(train.iter().map(|s| &s.scenario[..]), cfg.scenario_dim, 1e-2);
    let mut rng = stream_rng(cfg.seed, RngStream::Pretrain);
    let groups = ObjectiveKind::Vae.default_groups(cfg.classifier_on_trunk);
    let log = run_epochs(
        &mut model,
        cfg,
        ObjectiveKind::Vae,
        &groups,
        train,
        cfg.pretrain_epochs,
        "pretrain",
        &mut rng,
    )?;
    let holdout_ade = reconstruction_ade(&model, if holdout.is_empty() { train } else { holdout })?;
    if cfg.enforce_ade_gate && !(holdout_ade < cfg.ade_gate) {
        return Err(Error::GateNotMet {
            ade: holdout_ade,
            gate: cfg.ade_gate,
        });
    }
    Ok(PretrainOutcome {
        model,
        log,
        holdout_ade,
        rng,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd iterations from the given centroids; returns assignments and the
/// indices of clusters left empty.
fn lloyd(points: &[Vec<f64>], centroids: &mut [Vec<f64>], iterations: usize) -> (Vec<usize>, Vec<usize>) {
    let dim = points[0].len();
    let k = centroids.len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..iterations.max(1) {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let (j, _) = nearest(p, centroids);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for d in 0..dim {
                sums[a][d] += p[d];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for d in 0..dim {
                    centroids[j][d] = sums[j][d] / counts[j] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut counts = vec![0usize; k];
    for &a in &assign {
        counts[a] += 1;
    }
    let empty = (0..k).filter(|j| counts[*j] == 0).collect();
    (assign, empty)
}

/// k-means with farthest-point seeding. An empty cluster is re-seeded at
/// the point farthest from its centroid and the iterations re-run once.
pub fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, iterations: usize, rng: &mut R) -> Result<KMeansResult> {
    if k == 0 || points.is_empty() {
        return Err(Error::Initialization(
            "k-means needs k >= 1 and at least one point".into(),
        ));
    }
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let (far, _) = min_d
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, d)| if *d > b.1 { (i, *d) } else { b });
        let c = points[far].clone();
        for (md, p) in min_d.iter_mut().zip(points) {
            *md = md.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    let (mut assign, empty) = lloyd(points, &mut centroids, iterations);
    if !empty.is_empty() {
        let mut taken = Vec::new();
        for j in empty {
            let far = points
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken.contains(i))
                .map(|(i, p)| (i, sq_dist(p, &centroids[assign[i]])))
                .fold((0, f64::NEG_INFINITY), |b, (i, d)| if d > b.1 { (i, d) } else { b })
                .0;
            taken.push(far);
            centroids[j] = points[far].clone();
        }
        let (a, still_empty) = lloyd(points, &mut centroids, iterations);
        if !still_empty.is_empty() {
            return Err(Error::Initialization(format!(
                "k-means left {} cluster(s) empty after re-seeding",
                still_empty.len()
            )));
        }
        assign = a;
    }
    Ok(KMeansResult {
        centroids,
        assignments: assign,
    })
}

/// Place the mixture components at k-means centroids of encoded means.
pub fn init_mixture(m: &mut ModelState, cfg: &TrainConfig, data: &[TrainingSample]) -> Result<KMeansResult> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let mut rng = stream_rng(cfg.seed, RngStream::KMeans);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(cfg.init_sample_count.max(1));
    idx.sort_unstable();
    let points: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| m.encode_x(&data[i].trajectory).map(|q| q.mean().to_vec()))
        .collect::<Result<_>>()?;
    let k = m.num_actions();
    let result = kmeans(&points, k, cfg.kmeans_iterations, &mut rng)?;
    set_components_from_clusters(m, &points, &result)?;
    Ok(result)
}

fn set_components_from_clusters(m: &mut ModelState, points: &[Vec<f64>], result: &KMeansResult) -> Result<()> {
    let dim = m.latent_dim();
    for (j, c) in result.centroids.iter().enumerate() {
        let mut var = vec![0.0; dim];
        let mut n = 0usize;
        for (p, &a) in points.iter().zip(&result.assignments) {
            if a == j {
                n += 1;
                for d in 0..dim {
                    var[d] += (p[d] - c[d]).powi(2);
                }
            }
        }
        let log_var: Vec<f64> = var.iter().map(|v| (v / n.max(1) as f64).max(1e-2).ln()).collect();
        m.mixture.set_component(j, &DiagGaussian::new(c.clone(), log_var)?)?;
    }
    Ok(())
}

/// Optimize one stage. `Dual` updates only the dual encoder; the other
/// stages update every group their objective touches.
pub fn train_stage(
    m: &mut ModelState,
    cfg: &TrainConfig,
    stage: Stage,
    data: &[TrainingSample],
) -> Result<(Vec<EpochRecord>, ChaCha8Rng)> {
    cfg.validate()?;
    check_data(cfg, data)?;
    if stage == Stage::Dual && m.config.classifier_on_trunk {
        return Err(Error::Config(
            "dual-only training cannot freeze the classifier when it shares the dual trunk".into(),
        ));
    }
    if matches!(stage, Stage::Dual | Stage::Unified) {
        if cfg.pin_dual_heads {
            m.pin_dual_to_priors();
        } else {
            m.seed_dual_from_priors(cfg.dual_seed_scale);
        }
    }
    let kind = stage.objective();
    let groups = kind.default_groups(m.config.classifier_on_trunk);
    let mut rng = stream_rng(
        cfg.seed,
        match stage {
            Stage::Base => RngStream::Base,
            Stage::Dual => RngStream::Dual,
            Stage::Unified => RngStream::Unified,
        },
    );
    let log = run_epochs(m, cfg, kind, &groups, data, cfg.epochs(stage), stage.name(), &mut rng)?;
    Ok((log, rng))
}

pub fn train_base(m: &mut ModelState, cfg: &TrainConfig, data: &[TrainingSample]) -> Result<Vec<EpochRecord>> {
    train_stage(m, cfg, Stage::Base, data).map(|r| r.0)
}

pub fn train_dual(m: &mut ModelState, cfg: &TrainConfig, data: &[TrainingSample]) -> Result<Vec<EpochRecord>> {
    train_stage(m, cfg, Stage::Dual, data).map(|r| r.0)
}

pub fn train_unified(m: &mut ModelState, cfg: &TrainConfig, data: &[TrainingSample]) -> Result<Vec<EpochRecord>> {
    train_stage(m, cfg, Stage::Unified, data).map(|r| r.0)
}
