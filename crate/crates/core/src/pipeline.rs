//! The staged pipeline end to end, in memory: generate, pretrain, initialize
//! the mixture, train base then dual (or unified), evaluate.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, RngState, StageMarker};
use crate::error::Result;
use crate::evaluation::{metrics, MetricsOptions, MetricsReport, PosteriorKind};
use crate::model::ModelState;
use crate::objectives::ObjectiveKind;
use crate::synthdata::{generate_dataset, split_holdout, training_view, GeneratorConfig, LabeledSample};
use crate::training::{
    init_mixture, pretrain_vae, stream_rng, train_stage, EpochRecord, RngStream, Stage, TrainConfig,
};

/// Generator and training settings in one file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| crate::Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if self.generator.horizon != self.train.horizon {
            return Err(crate::Error::Config(format!(
                "generator horizon {} differs from training horizon {}",
                self.generator.horizon, self.train.horizon
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of the whole configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::checkpoint::hex(&Sha256::digest(&json))
    }

    /// Apply a seed to both the generator and the training run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.generator.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// Which posterior and objective evaluate a model trained through `stage`.
pub fn eval_options(cfg: &TrainConfig, stage: StageMarker) -> MetricsOptions {
    let (posterior, objective) = match stage {
        StageMarker::Unified => (PosteriorKind::Unified, ObjectiveKind::Unified),
        StageMarker::Dual => (PosteriorKind::Base, ObjectiveKind::Dual),
        _ => (PosteriorKind::Base, ObjectiveKind::Base),
    };
    MetricsOptions {
        threshold: cfg.action_threshold,
        top_m: 3.min(cfg.num_actions),
        posterior,
        objective,
        n_noise: 4,
        seed: cfg.seed,
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub train: Vec<LabeledSample>,
    pub holdout: Vec<LabeledSample>,
    pub holdout_ade: f64,
    pub checkpoints: Vec<Checkpoint>,
    pub logs: Vec<EpochRecord>,
    pub metrics: MetricsReport,
    pub timings: Vec<(String, Duration)>,
}

impl PipelineRun {
    pub fn checkpoint(&self, stage: StageMarker) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.stage == stage)
    }

    pub fn final_model(&self) -> &ModelState {
        &self.checkpoints.last().unwrap().model
    }

    pub fn total_time(&self) -> Duration {
        self.timings.iter().map(|t| t.1).sum()
    }
}

fn snapshot(cfg: &TrainConfig, stage: StageMarker, rng: &rand_chacha::ChaCha8Rng, m: &ModelState) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        stage,
        rng: RngState::capture(rng),
        model: m.clone(),
    }
}

/// Run every stage. `unified` selects the joint objective instead of base
/// followed by dual.
pub fn run_pipeline(cfg: &PipelineConfig, unified: bool) -> Result<PipelineRun> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, Duration)>| {
        let now = Instant::now();
        timings.push((name.to_string(), now - clock));
        clock = now;
    };
    let tc = &cfg.train;
    let data = generate_dataset(&cfg.generator)?;
    let (train, holdout) = split_holdout(data, cfg.generator.holdout_fraction);
    let train_view = training_view(&train);
    let holdout_view = training_view(&holdout);
    lap("generate", &mut timings);

    let pre = pretrain_vae(tc, &train_view, &holdout_view)?;
    let mut logs = pre.log.clone();
    let mut checkpoints = vec![snapshot(tc, StageMarker::Pretrained, &pre.rng, &pre.model)];
    let mut model = pre.model;
    lap("pretrain", &mut timings);

    init_mixture(&mut model, tc, &train_view)?;
    checkpoints.push(snapshot(
        tc,
        StageMarker::Initialized,
        &stream_rng(tc.seed, RngStream::KMeans),
        &model,
    ));
    lap("init", &mut timings);

    let stages: &[(Stage, StageMarker)] = if unified {
        &[(Stage::Unified, StageMarker::Unified)]
    } else {
        &[(Stage::Base, StageMarker::Base), (Stage::Dual, StageMarker::Dual)]
    };
    for &(stage, marker) in stages {
        let (log, rng) = train_stage(&mut model, tc, stage, &train_view)?;
        logs.extend(log);
        checkpoints.push(snapshot(tc, marker, &rng, &model));
        lap(stage.name(), &mut timings);
    }

    let last = checkpoints.last().unwrap().stage;
    let report = metrics(&model, &holdout, &eval_options(tc, last))?;
    lap("eval", &mut timings);
    Ok(PipelineRun {
        train,
        holdout,
        holdout_ade: pre.holdout_ade,
        checkpoints,
        logs,
        metrics: report,
        timings,
    })
}
