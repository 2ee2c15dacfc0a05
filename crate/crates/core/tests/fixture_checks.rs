//! Behavioral checks on models trained on the synthetic fixture, staged and
//! unified. One PASS/FAIL line per check.
//!
//! Checks phrased about "a scenario" pass when the property holds for a
//! strict majority of the qualifying held-out scenarios; the fraction is
//! printed either way.

use std::collections::BTreeMap;
use std::process::ExitCode;

use actionset::checkpoint::StageMarker;
use actionset::evaluation::{assignments, holdout_elbo, PosteriorKind};
use actionset::gaussmath::DiagGaussian;
use actionset::model::ModelState;
use actionset::objectives::{evaluate, EvalOptions, Noise, ObjectiveKind};
use actionset::pipeline::{run_pipeline, PipelineConfig, PipelineRun};
use actionset::synthdata::{LabeledSample, ManeuverKind, RoadLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEPARATION_SIGMAS: f64 = 2.0;
const INTERSECTION_ACTIONS: std::ops::RangeInclusive<usize> = 2..=3;
const UNIFIED_BAND: f64 = 0.10;
const NOISE_DRAWS: usize = 4;
const EVAL_SEED: u64 = 99;

/// Checks expected to fail on the fixture; they print FAIL without failing
/// the process.
const KNOWN_FAILING: &[&str] = &[];

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn print(c: &Check) {
    let tag = if c.pass { "PASS" } else { "FAIL" };
    let known = if !c.pass && KNOWN_FAILING.contains(&c.name) {
        " [known]"
    } else {
        ""
    };
    println!("[{tag}] {}: {}{known}", c.name, c.detail);
}

fn majority(hits: usize, total: usize) -> bool {
    total > 0 && 2 * hits > total
}

fn family_of(cfg: &PipelineConfig, kind: ManeuverKind) -> Vec<usize> {
    cfg.generator
        .families
        .iter()
        .enumerate()
        .filter(|(_, f)| f.kind == kind)
        .map(|(i, _)| i)
        .collect()
}

/// Majority generator family of the samples each action claims.
fn action_families(m: &ModelState, holdout: &[LabeledSample]) -> BTreeMap<usize, usize> {
    let assign = assignments(m, holdout, PosteriorKind::Base).unwrap();
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (a, s) in assign.iter().zip(holdout) {
        *counts.entry(*a).or_default().entry(s.hidden_label).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(a, c)| (a, c.into_iter().max_by_key(|(l, n)| (*n, usize::MAX - l)).unwrap().0))
        .collect()
}

fn separation(a: &DiagGaussian, b: &DiagGaussian) -> f64 {
    let dist = a
        .mean()
        .iter()
        .zip(b.mean())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let rms = |g: &DiagGaussian| (g.variances().sum::<f64>() / g.dim() as f64).sqrt();
    dist / rms(a).max(rms(b))
}

fn encoder_separation(cfg: &PipelineConfig, run: &PipelineRun) -> Check {
    let m = run.checkpoint(StageMarker::Pretrained).unwrap();
    let m = &run.checkpoint(StageMarker::Base).map_or(m, |c| c).model;
    let first = |kind| {
        let fam = family_of(cfg, kind);
        run.holdout.iter().find(|s| fam.contains(&s.hidden_label)).unwrap()
    };
    let straight = m.encode_x(first(ManeuverKind::Straight).trajectory.as_slice()).unwrap();
    let left = m.encode_x(first(ManeuverKind::LeftTurn).trajectory.as_slice()).unwrap();
    let sep = separation(&straight, &left);
    let mut worst = f64::INFINITY;
    let labels: Vec<usize> = (0..cfg.generator.families.len()).collect();
    for &i in &labels {
        for &j in &labels[i + 1..] {
            let a = run.holdout.iter().find(|s| s.hidden_label == i);
            let b = run.holdout.iter().find(|s| s.hidden_label == j);
            if let (Some(a), Some(b)) = (a, b) {
                let qa = m.encode_x(a.trajectory.as_slice()).unwrap();
                let qb = m.encode_x(b.trajectory.as_slice()).unwrap();
                worst = worst.min(separation(&qa, &qb));
            }
        }
    }
    Check {
        name: "maneuvers encode apart",
        pass: sep >= SEPARATION_SIGMAS,
        detail: format!(
            "straight vs left-turn encoder means {sep:.2} sigma apart (min {SEPARATION_SIGMAS}); closest family pair {worst:.2} sigma"
        ),
    }
}

fn turn_lane_argmax(cfg: &PipelineConfig, run: &PipelineRun) -> Check {
    let m = run.final_model();
    let families = action_families(m, &run.holdout);
    let left = family_of(cfg, ManeuverKind::LeftTurn);
    let turn_actions: Vec<usize> = families
        .iter()
        .filter(|(_, f)| left.contains(f))
        .map(|(a, _)| *a)
        .collect();
    let scenes: Vec<&LabeledSample> = run
        .holdout
        .iter()
        .filter(|s| left.contains(&s.hidden_label) && s.scenario.layout() == Some(RoadLayout::TurnLane))
        .collect();
    let hits = scenes
        .iter()
        .filter(|s| turn_actions.contains(&m.prior_y(s.scenario.as_slice()).unwrap().argmax()))
        .count();
    Check {
        name: "turn lane favors a turn action",
        pass: majority(hits, scenes.len()),
        detail: format!(
            "argmax p(y|s) is a left-turn action in {hits}/{} left-turn-lane scenarios; left-turn actions {turn_actions:?}",
            scenes.len()
        ),
    }
}

fn straight_narrowing(cfg: &PipelineConfig, run: &PipelineRun) -> Check {
    let m = run.final_model();
    let straight = family_of(cfg, ManeuverKind::Straight);
    let scenes: Vec<&LabeledSample> = run
        .holdout
        .iter()
        .filter(|s| straight.contains(&s.hidden_label) && s.scenario.layout() == Some(RoadLayout::Straight))
        .collect();
    let mut hits = 0;
    let mut ratio_sum = 0.0;
    for s in &scenes {
        let k = m.prior_y(s.scenario.as_slice()).unwrap().argmax();
        let mean_var = |g: &DiagGaussian| g.variances().sum::<f64>() / g.dim() as f64;
        let post = mean_var(&m.dual_encode(s.scenario.as_slice(), k).unwrap());
        let prior = mean_var(&m.mixture_component(k).unwrap());
        hits += (post < prior) as usize;
        ratio_sum += post / prior;
    }
    Check {
        name: "conditioning narrows the straight action",
        pass: majority(hits, scenes.len()),
        detail: format!(
            "q(z|y,s) variance below p(z|y) in {hits}/{} straight-road scenarios (mean ratio {:.3})",
            scenes.len(),
            ratio_sum / scenes.len().max(1) as f64
        ),
    }
}

fn intersection_multimodality(run: &PipelineRun) -> Check {
    let m = run.final_model();
    let threshold = run.metrics.threshold;
    let mut hist = BTreeMap::new();
    let mut total = 0;
    for s in &run.holdout {
        if matches!(
            s.scenario.layout(),
            Some(RoadLayout::FourWay | RoadLayout::ThreeWay | RoadLayout::TurnLane)
        ) {
            let n = m
                .prior_y(s.scenario.as_slice())
                .unwrap()
                .probs()
                .iter()
                .filter(|p| **p > threshold)
                .count();
            *hist.entry(n).or_insert(0usize) += 1;
            total += 1;
        }
    }
    let hits: usize = hist
        .iter()
        .filter(|(n, _)| INTERSECTION_ACTIONS.contains(n))
        .map(|(_, c)| c)
        .sum();
    Check {
        name: "intersections stay multimodal",
        pass: majority(hits, total),
        detail: format!(
            "{hits}/{total} intersection scenarios keep {}-{} actions above {threshold}; counts by action number {hist:?}",
            INTERSECTION_ACTIONS.start(),
            INTERSECTION_ACTIONS.end()
        ),
    }
}

/// Mean over the held-out split of the unified objective's dual terms,
/// `recon_x' - E KL(q(z|y,s) || p(z|y))`, with fixed noise.
fn unified_dual_terms(m: &ModelState, holdout: &[LabeledSample]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    let (d, k) = (m.latent_dim(), m.num_actions());
    let mut total = 0.0;
    for s in holdout {
        for _ in 0..NOISE_DRAWS {
            let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
            let noise = Noise {
                z: draw(d),
                per_action: (0..k).map(|_| draw(d)).collect(),
            };
            let r = evaluate(
                m,
                ObjectiveKind::Unified,
                s.trajectory.as_slice(),
                s.scenario.as_slice(),
                &noise,
                &EvalOptions::default(),
                None,
            )
            .unwrap();
            total += r.recon_x_prime - r.expected_kl_z_prime;
        }
    }
    total / (holdout.len() * NOISE_DRAWS) as f64
}

fn unified_beats_base_on_dual_terms(staged: &PipelineRun, unified: &PipelineRun) -> Check {
    let base = unified_dual_terms(&staged.checkpoint(StageMarker::Base).unwrap().model, &unified.holdout);
    let uni = unified_dual_terms(unified.final_model(), &unified.holdout);
    Check {
        name: "unified improves the dual terms",
        pass: uni >= base,
        detail: format!("held-out dual terms: unified {uni:.3}, base-trained {base:.3}"),
    }
}

fn unified_matches_staged(staged: &PipelineRun, unified: &PipelineRun) -> Check {
    let m = staged.final_model();
    let base = holdout_elbo(m, ObjectiveKind::Base, &staged.holdout, NOISE_DRAWS, EVAL_SEED).unwrap();
    let dual = holdout_elbo(m, ObjectiveKind::Dual, &staged.holdout, NOISE_DRAWS, EVAL_SEED).unwrap();
    let summed = base + dual;
    let uni = holdout_elbo(
        unified.final_model(),
        ObjectiveKind::Unified,
        &unified.holdout,
        NOISE_DRAWS,
        EVAL_SEED,
    )
    .unwrap();
    let rel = (uni - summed).abs() / summed.abs();
    Check {
        name: "unified objective near staged sum",
        pass: rel <= UNIFIED_BAND,
        detail: format!(
            "unified {uni:.3} vs staged base {base:.3} + dual {dual:.3} = {summed:.3} (relative gap {rel:.3}, band {UNIFIED_BAND})"
        ),
    }
}

fn main() -> ExitCode {
    let cfg = PipelineConfig::default();
    let staged = run_pipeline(&cfg, false).expect("staged fixture run");
    let unified = run_pipeline(&cfg, true).expect("unified fixture run");
    assert_eq!(staged.holdout, unified.holdout);
    let timings: Vec<String> = unified
        .timings
        .iter()
        .map(|(n, t)| format!("{n} {:.0}s", t.as_secs_f64()))
        .collect();
    println!("unified pipeline stages: {}", timings.join(", "));

    let tagged = |mut c: Check, run: &str| {
        c.detail = format!("({run}) {}", c.detail);
        c
    };
    let checks = [
        tagged(encoder_separation(&cfg, &staged), "staged"),
        tagged(turn_lane_argmax(&cfg, &staged), "staged"),
        tagged(turn_lane_argmax(&cfg, &unified), "unified"),
        tagged(straight_narrowing(&cfg, &staged), "staged"),
        tagged(straight_narrowing(&cfg, &unified), "unified"),
        tagged(intersection_multimodality(&staged), "staged"),
        unified_beats_base_on_dual_terms(&staged, &unified),
        unified_matches_staged(&staged, &unified),
    ];
    for c in &checks {
        print(c);
    }
    let unexpected = checks
        .iter()
        .filter(|c| !c.pass && !KNOWN_FAILING.contains(&c.name))
        .count();
    println!(
        "fixture checks: {}/{} passed",
        checks.iter().filter(|c| c.pass).count(),
        checks.len()
    );
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
