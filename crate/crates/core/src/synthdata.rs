//! Synthetic scenario/trajectory pairs and the line-delimited dataset format.
//!
//! Trajectories live in a target-centric frame: origin at the current pose,
//! heading along `+y`, `x` to the right, all distances in meters. Each sample
//! rolls a piecewise constant-curvature path forward under a trapezoidal
//! speed profile.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::IgnoredAny;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of road-layout categories in the one-hot block.
pub const LAYOUT_COUNT: usize = 5;
/// Scenario feature length: speed, history (2), curvature, layout one-hot, lane offset, lead gap.
pub const SCENARIO_DIM: usize = 4 + LAYOUT_COUNT + 2;
/// Lead-vehicle gaps are reported capped at this distance.
pub const LEAD_GAP_CAP: f64 = 50.0;
const ACCEL: f64 = 1.5;
const LANE_WIDTH: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverKind {
    Straight,
    LeftTurn,
    RightTurn,
    UTurn,
    LaneChange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadLayout {
    Straight,
    FourWay,
    ThreeWay,
    TurnLane,
    Parking,
}

impl RoadLayout {
    pub const ALL: [RoadLayout; LAYOUT_COUNT] = [
        RoadLayout::Straight,
        RoadLayout::FourWay,
        RoadLayout::ThreeWay,
        RoadLayout::TurnLane,
        RoadLayout::Parking,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|l| *l == self).unwrap()
    }

    fn is_intersection_like(self) -> bool {
        !matches!(self, RoadLayout::Straight)
    }
}

impl ManeuverKind {
    /// Layout distribution a scenario is drawn from, given the maneuver.
    fn layout_weights(self) -> [f64; LAYOUT_COUNT] {
        match self {
            ManeuverKind::Straight => [0.5, 0.35, 0.0, 0.0, 0.15],
            ManeuverKind::LeftTurn | ManeuverKind::RightTurn => [0.0, 0.45, 0.3, 0.25, 0.0],
            ManeuverKind::UTurn => [0.0, 0.3, 0.0, 0.3, 0.4],
            ManeuverKind::LaneChange => [1.0, 0.0, 0.0, 0.0, 0.0],
        }
    }

    /// Signed turn angle swept by the arc, counter-clockwise positive.
    fn turn_angle(self) -> Option<f64> {
        match self {
            ManeuverKind::LeftTurn => Some(FRAC_PI_2),
            ManeuverKind::RightTurn => Some(-FRAC_PI_2),
            ManeuverKind::UTurn => Some(PI),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub name: String,
    pub kind: ManeuverKind,
    pub weight: f64,
    /// Initial speed range (m/s).
    pub speed: [f64; 2],
    /// Turn radius range (m); ignored by non-turning families.
    #[serde(default = "default_radius")]
    pub radius: [f64; 2],
    /// Probability that a slower lead vehicle is present (straight and lane-change).
    #[serde(default = "default_lead_probability")]
    pub lead_probability: f64,
    /// Relative spread of the unobserved cruise-speed factor.
    #[serde(default = "default_speed_jitter")]
    pub speed_jitter: f64,
}

fn default_radius() -> [f64; 2] {
    [10.0, 20.0]
}
fn default_lead_probability() -> f64 {
    0.5
}
fn default_speed_jitter() -> f64 {
    0.03
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "default_n")]
    pub n_samples: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Per-coordinate Gaussian noise on every waypoint (m).
    #[serde(default = "default_waypoint_noise")]
    pub waypoint_noise: f64,
    /// Multiplier on the scenario-feature measurement noise.
    #[serde(default = "default_one")]
    pub feature_noise: f64,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default = "default_families")]
    pub families: Vec<FamilySpec>,
}

fn default_n() -> usize {
    20_000
}
fn default_seed() -> u64 {
    13
}
fn default_horizon() -> usize {
    30
}
fn default_dt() -> f64 {
    0.2
}
fn default_waypoint_noise() -> f64 {
    0.15
}
fn default_one() -> f64 {
    1.0
}
fn default_holdout() -> f64 {
    0.1
}

fn family(name: &str, kind: ManeuverKind, weight: f64, speed: [f64; 2], radius: [f64; 2], lead: f64) -> FamilySpec {
    FamilySpec {
        name: name.into(),
        kind,
        weight,
        speed,
        radius,
        lead_probability: lead,
        speed_jitter: default_speed_jitter(),
    }
}

/// The six-family fixture: straight-slow, straight-fast, left turn, right
/// turn, U-turn and lane change.
pub fn default_families() -> Vec<FamilySpec> {
    use ManeuverKind::*;
    vec![
        family("straight-slow", Straight, 0.2, [3.0, 7.0], default_radius(), 0.5),
        family("straight-fast", Straight, 0.2, [10.0, 16.0], default_radius(), 0.5),
        family("left-turn", LeftTurn, 0.15, [3.0, 6.0], [10.0, 20.0], 0.0),
        family("right-turn", RightTurn, 0.15, [2.5, 5.0], [6.0, 14.0], 0.0),
        family("u-turn", UTurn, 0.1, [2.0, 4.0], [4.0, 8.0], 0.0),
        family("lane-change", LaneChange, 0.2, [8.0, 14.0], default_radius(), 0.8),
    ]
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_samples: default_n(),
            seed: default_seed(),
            horizon: default_horizon(),
            dt: default_dt(),
            waypoint_noise: default_waypoint_noise(),
            feature_noise: 1.0,
            holdout_fraction: default_holdout(),
            families: default_families(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.len() < 2 {
            return Err(Error::Config("at least two maneuver families are required".into()));
        }
        if self
            .families
            .iter()
            .any(|f| !(f.weight >= 0.0) || !f.weight.is_finite())
        {
            return Err(Error::Config("family weights must be finite and non-negative".into()));
        }
        if self.families.iter().map(|f| f.weight).sum::<f64>() <= 0.0 {
            return Err(Error::Config("family weights sum to zero".into()));
        }
        for f in &self.families {
            if !(f.speed[0] > 0.0 && f.speed[0] <= f.speed[1]) {
                return Err(Error::Config(format!(
                    "family {}: invalid speed range {:?}",
                    f.name, f.speed
                )));
            }
            if f.kind.turn_angle().is_some() && !(f.radius[0] > 0.0 && f.radius[0] <= f.radius[1]) {
                return Err(Error::Config(format!(
                    "family {}: invalid radius range {:?}",
                    f.name, f.radius
                )));
            }
            if !(0.0..=1.0).contains(&f.lead_probability) || !(0.0..1.0).contains(&f.speed_jitter) {
                return Err(Error::Config(format!(
                    "family {}: probability/jitter out of range",
                    f.name
                )));
            }
        }
        if self.horizon == 0 || !(self.dt > 0.0) {
            return Err(Error::Config("horizon and dt must be positive".into()));
        }
        if !(self.waypoint_noise >= 0.0) || !(self.feature_noise >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn traj_dim(&self) -> usize {
        2 * self.horizon
    }
}

/// `T` future waypoints, flattened as `[x_1, y_1, …, x_T, y_T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory(pub Vec<f64>);

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.0.len() / 2
    }

    pub fn waypoint(&self, t: usize) -> [f64; 2] {
        [self.0[2 * t], self.0[2 * t + 1]]
    }

    pub fn waypoints(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.0.chunks_exact(2).map(|c| [c[0], c[1]])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Fixed-length context vector; see [`SCENARIO_DIM`] for the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFeatures(pub Vec<f64>);

impl ScenarioFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn speed(&self) -> f64 {
        self.0[0]
    }

    pub fn layout(&self) -> Option<RoadLayout> {
        let block = self.0.get(4..4 + LAYOUT_COUNT)?;
        block.iter().position(|v| *v == 1.0).map(|i| RoadLayout::ALL[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub scenario: ScenarioFeatures,
    pub trajectory: Trajectory,
    /// Generator family index. Only evaluation reads it.
    pub hidden_label: usize,
}

/// What training code sees: no generator label, only an optional known
/// action index supplied by a user for partial supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: u64,
    pub scenario: Vec<f64>,
    pub trajectory: Vec<f64>,
    pub known_action: Option<usize>,
}

impl TrainingSample {
    pub fn from_labeled(s: &LabeledSample) -> Self {
        Self {
            id: s.id,
            scenario: s.scenario.0.clone(),
            trajectory: s.trajectory.0.clone(),
            known_action: None,
        }
    }
}

/// The training view of a labeled dataset.
pub fn training_view(samples: &[LabeledSample]) -> Vec<TrainingSample> {
    samples.iter().map(TrainingSample::from_labeled).collect()
}

/// A piecewise constant-curvature path parameterized by arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct ManeuverPath {
    /// `(length, curvature)` segments; the last segment extends indefinitely.
    segments: Vec<(f64, f64)>,
}

impl ManeuverPath {
    pub fn new(segments: Vec<(f64, f64)>) -> Self {
        Self { segments }
    }

    /// `(x, y, heading)` at arc length `s`, heading measured counter-clockwise from `+y`.
    pub fn pose_at(&self, s: f64) -> (f64, f64, f64) {
        let (mut x, mut y, mut th) = (0.0, 0.0, 0.0);
        let mut remaining = s;
        let n = self.segments.len();
        for (i, &(len, kappa)) in self.segments.iter().enumerate() {
            let step = if i + 1 == n { remaining } else { remaining.min(len) };
            let (dx, dy, dth) = arc_step(step, kappa, th);
            x += dx;
            y += dy;
            th += dth;
            remaining -= step;
            if remaining <= 0.0 {
                break;
            }
        }
        (x, y, th)
    }
}

/// Displacement along an arc of length `s` and curvature `kappa` starting at heading `th`.
fn arc_step(s: f64, kappa: f64, th: f64) -> (f64, f64, f64) {
    // Direction of travel is (-sin th, cos th) with th = 0 pointing along +y.
    if kappa.abs() < 1e-12 {
        return (-th.sin() * s, th.cos() * s, 0.0);
    }
    let dth = kappa * s;
    let r = 1.0 / kappa;
    let dx = r * ((th + dth).cos() - th.cos());
    let dy = r * ((th + dth).sin() - th.sin());
    (dx, dy, dth)
}

/// Arc length after time `t` when ramping from `v0` to `v_cruise` at `ACCEL` and holding.
fn distance_at(t: f64, v0: f64, v_cruise: f64, accel: f64) -> f64 {
    let ramp = (v_cruise - v0).abs() / accel;
    let a = if v_cruise >= v0 { accel } else { -accel };
    if t <= ramp {
        v0 * t + 0.5 * a * t * t
    } else {
        v0 * ramp + 0.5 * a * ramp * ramp + v_cruise * (t - ramp)
    }
}

/// Trapezoidal profile covering exactly `total` meters in `horizon` seconds.
fn cruise_for_distance(v0: f64, total: f64, horizon: f64) -> (f64, f64) {
    let mut accel = ACCEL;
    // Decelerating to a stop overshoots: brake harder so the stop lands on `total`.
    if distance_at(horizon, v0, 0.0, accel) > total {
        accel = v0 * v0 / (2.0 * total);
        return (0.0, accel);
    }
    let (mut lo, mut hi) = (0.0, v0 + total / horizon * 4.0 + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if distance_at(horizon, v0, mid, accel) < total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi), accel)
}

/// Everything drawn for one sample before noise is added.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub path: ManeuverPath,
    pub v0: f64,
    pub v_cruise: f64,
    pub accel: f64,
    /// Arc length at which the path stops (turns end exactly at the arc end).
    pub max_distance: Option<f64>,
}

impl Rollout {
    pub fn max_speed(&self) -> f64 {
        self.v0.max(self.v_cruise)
    }

    /// Noise-free waypoints at `t = dt, 2dt, …, T dt`.
    pub fn waypoints(&self, horizon: usize, dt: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * horizon);
        for i in 1..=horizon {
            let mut s = distance_at(i as f64 * dt, self.v0, self.v_cruise, self.accel);
            if let Some(max) = self.max_distance {
                s = s.min(max);
                if i == horizon {
                    s = max;
                }
            }
            let (x, y, _) = self.path.pose_at(s);
            out.push(x);
            out.push(y);
        }
        out
    }
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn pick_weighted<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Draw one (scenario, trajectory) pair from family `spec`.
pub fn sample_family<R: Rng>(
    spec: &FamilySpec,
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> (ScenarioFeatures, Trajectory, Rollout) {
    let horizon_s = cfg.horizon as f64 * cfg.dt;
    let fnoise = cfg.feature_noise;
    let layout = RoadLayout::ALL[pick_weighted(rng, &spec.kind.layout_weights())];
    let v0 = uniform(rng, spec.speed);
    let jitter = 1.0 + spec.speed_jitter * (2.0 * rng.random::<f64>() - 1.0);
    let has_lead = rng.random::<f64>() < spec.lead_probability;
    let gap = if has_lead {
        uniform(rng, [8.0, 40.0])
    } else {
        LEAD_GAP_CAP
    };
    let mut lane_offset = uniform(rng, [-0.45, 0.45]);
    let mut curvature = if layout.is_intersection_like() {
        1.0 / uniform(rng, [4.0, 20.0])
    } else {
        0.0
    };

    let rollout = match spec.kind {
        ManeuverKind::Straight | ManeuverKind::LaneChange => {
            // A lead vehicle closer than 30 m slows the cruise speed.
            let follow = 0.6 + 0.4 * (gap.min(30.0) / 30.0);
            let v_cruise = v0 * follow * jitter;
            let path = if spec.kind == ManeuverKind::LaneChange {
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                lane_offset = side * uniform(rng, [0.3, 0.9]);
                let max_heading = uniform(rng, [0.12, 0.2]);
                let radius = LANE_WIDTH / (2.0 * (1.0 - max_heading.cos()));
                let len = radius * max_heading;
                // Moving right (+x) means turning clockwise first.
                let kappa = -side / radius;
                ManeuverPath::new(vec![(len, kappa), (len, -kappa), (0.0, 0.0)])
            } else {
                ManeuverPath::new(vec![(0.0, 0.0)])
            };
            Rollout {
                path,
                v0,
                v_cruise,
                accel: ACCEL,
                max_distance: None,
            }
        }
        kind => {
            let angle = kind.turn_angle().unwrap();
            let radius = uniform(rng, spec.radius);
            curvature = 1.0 / radius;
            let total = radius * angle.abs();
            let (v_cruise, accel) = cruise_for_distance(v0, total, horizon_s);
            Rollout {
                path: ManeuverPath::new(vec![(total, angle.signum() / radius)]),
                v0,
                v_cruise,
                accel,
                max_distance: Some(total),
            }
        }
    };

    let mut traj = rollout.waypoints(cfg.horizon, cfg.dt);
    if cfg.waypoint_noise > 0.0 {
        let n = Normal::new(0.0, cfg.waypoint_noise).unwrap();
        traj.iter_mut().for_each(|v| *v += n.sample(rng));
    }

    let mut gauss = |sd: f64| -> f64 {
        if sd * fnoise > 0.0 {
            Normal::new(0.0, sd * fnoise).unwrap().sample(rng)
        } else {
            0.0
        }
    };
    let mut s = Vec::with_capacity(SCENARIO_DIM);
    s.push(v0 + gauss(0.1));
    s.push(gauss(0.05));
    s.push(v0 + gauss(0.1));
    s.push(curvature);
    for l in RoadLayout::ALL {
        s.push(if l == layout { 1.0 } else { 0.0 });
    }
    s.push(lane_offset);
    s.push(gap.min(LEAD_GAP_CAP));
    (ScenarioFeatures(s), Trajectory(traj), rollout)
}

/// Draw `n_samples` labeled samples; deterministic in `(cfg, cfg.seed)`.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<LabeledSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights: Vec<f64> = cfg.families.iter().map(|f| f.weight).collect();
    let mut out = Vec::with_capacity(cfg.n_samples);
    for id in 0..cfg.n_samples {
        let fam = pick_weighted(&mut rng, &weights);
        let (scenario, trajectory, _) = sample_family(&cfg.families[fam], cfg, &mut rng);
        out.push(LabeledSample {
            id: id as u64,
            scenario,
            trajectory,
            hidden_label: fam,
        });
    }
    Ok(out)
}

/// Split off the trailing `fraction` of samples as a held-out set.
pub fn split_holdout(samples: Vec<LabeledSample>, fraction: f64) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
    let n_hold = (samples.len() as f64 * fraction).round() as usize;
    let mut train = samples;
    let hold = train.split_off(train.len() - n_hold.min(train.len()));
    (train, hold)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: u64,
    scenario: Vec<f64>,
    trajectory: Vec<[f64; 2]>,
    label: usize,
    #[serde(default, rename = "known_action")]
    _known_action: IgnoredAny,
}

fn push_num(out: &mut String, v: f64) {
    // 17 significant digits round-trip every finite f64 exactly.
    write!(out, "{v:.16e}").unwrap();
}

/// One JSON object per sample, numbers with 17 significant digits.
pub fn format_record(s: &LabeledSample) -> String {
    let mut line = String::with_capacity(64 + 24 * (s.scenario.0.len() + s.trajectory.0.len()));
    write!(line, "{{\"id\":{},\"scenario\":[", s.id).unwrap();
    for (i, v) in s.scenario.0.iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        push_num(&mut line, *v);
    }
    line.push_str("],\"trajectory\":[");
    for (i, p) in s.trajectory.waypoints().enumerate() {
        if i > 0 {
            line.push(',');
        }
        line.push('[');
        push_num(&mut line, p[0]);
        line.push(',');
        push_num(&mut line, p[1]);
        line.push(']');
    }
    write!(line, "],\"label\":{}}}", s.hidden_label).unwrap();
    line
}

pub fn write_dataset(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        writeln!(w, "{}", format_record(s)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The label-free record shape used by training loaders. Deserializing
/// skips the `label` value without storing it.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingRecord {
    id: u64,
    scenario: Vec<f64>,
    trajectory: Vec<[f64; 2]>,
    #[serde(default, rename = "label")]
    _label: IgnoredAny,
    #[serde(default)]
    known_action: Option<usize>,
}

trait Shaped {
    fn scenario_len(&self) -> usize;
    fn horizon(&self) -> usize;
}

impl Shaped for RawRecord {
    fn scenario_len(&self) -> usize {
        self.scenario.len()
    }
    fn horizon(&self) -> usize {
        self.trajectory.len()
    }
}

impl Shaped for TrainingRecord {
    fn scenario_len(&self) -> usize {
        self.scenario.len()
    }
    fn horizon(&self) -> usize {
        self.trajectory.len()
    }
}

fn parse_records<R: Shaped + serde::de::DeserializeOwned>(
    text: &str,
    expected_horizon: Option<usize>,
) -> Result<Vec<R>> {
    let mut out = Vec::new();
    let mut dims: Option<(Option<usize>, usize)> = expected_horizon.map(|t| (None, t));
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: R = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if rec.horizon() == 0 || rec.scenario_len() == 0 {
            return Err(Error::Schema {
                line: lineno,
                message: "empty scenario or trajectory".into(),
            });
        }
        match &mut dims {
            None => dims = Some((Some(rec.scenario_len()), rec.horizon())),
            Some((sd, t)) => {
                if rec.horizon() != *t {
                    return Err(Error::Schema {
                        line: lineno,
                        message: format!("expected {} waypoints, found {}", t, rec.horizon()),
                    });
                }
                match sd {
                    None => *sd = Some(rec.scenario_len()),
                    Some(n) if *n != rec.scenario_len() => {
                        return Err(Error::Schema {
                            line: lineno,
                            message: format!("expected {} scenario features, found {}", n, rec.scenario_len()),
                        })
                    }
                    Some(_) => {}
                }
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Parse a dataset; every line must share the first line's dimensions (and
/// `expected_horizon`, when given).
pub fn parse_dataset(text: &str, expected_horizon: Option<usize>) -> Result<Vec<LabeledSample>> {
    Ok(parse_records::<RawRecord>(text, expected_horizon)?
        .into_iter()
        .map(|rec| LabeledSample {
            id: rec.id,
            scenario: ScenarioFeatures(rec.scenario),
            trajectory: Trajectory(rec.trajectory.into_iter().flatten().collect()),
            hidden_label: rec.label,
        })
        .collect())
}

/// Parse a dataset straight into the training view. Generator labels are
/// never materialized; an optional `known_action` field is kept.
pub fn parse_training_view(text: &str, expected_horizon: Option<usize>) -> Result<Vec<TrainingSample>> {
    Ok(parse_records::<TrainingRecord>(text, expected_horizon)?
        .into_iter()
        .map(|rec| TrainingSample {
            id: rec.id,
            scenario: rec.scenario,
            trajectory: rec.trajectory.into_iter().flatten().collect(),
            known_action: rec.known_action,
        })
        .collect())
}

pub fn read_training_view(path: &Path, expected_horizon: Option<usize>) -> Result<Vec<TrainingSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_training_view(&text, expected_horizon)
}

pub fn read_dataset(path: &Path, expected_horizon: Option<usize>) -> Result<Vec<LabeledSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, expected_horizon)
}
