//! `actionset` command-line pipeline.
//!
//! Every subcommand reads and writes a run directory (`--out`). Stages hand
//! over through checkpoints: `pretrain.ckpt`, `init.ckpt`, `base.ckpt`,
//! `dual.ckpt`, `unified.ckpt`. Each command leaves a
//! `<command>.manifest.json` next to its outputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actionset::checkpoint::{self, Checkpoint, RngState, StageMarker};
use actionset::evaluation::{action_set, export_plots, marginal_action_probs, metrics, predict, Panel, PredictionMode};
use actionset::model::ModelState;
use actionset::pipeline::{eval_options, PipelineConfig};
use actionset::synthdata::{
    generate_dataset, read_dataset, read_training_view, split_holdout, write_dataset, TrainingSample,
};
use actionset::training::{init_mixture, pretrain_vae, stream_rng, train_stage, write_log, RngStream, Stage};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

const TRAIN_FILE: &str = "train.jsonl";
const HOLDOUT_FILE: &str = "holdout.jsonl";
const LOCK_FILE: &str = ".actionset.lock";

#[derive(Parser, Debug)]
#[command(
    name = "actionset",
    version,
    about = "Learn discrete vehicle actions from trajectory-scenario pairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML file with [generator] and [train] sections; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the generator and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for checkpoints, logs and reports.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct DataDir {
    /// Directory holding train.jsonl and holdout.jsonl (defaults to --out).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic maneuver dataset.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the trajectory VAE.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataDir,
    },
    /// Place mixture components by k-means over encoded trajectories.
    InitClusters {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataDir,
    },
    /// Train one stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataDir,
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Predict actions for every scenario of a dataset file.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataDir,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Minimum p(y|s) for an action to be reported (defaults to the configured threshold).
        #[arg(long)]
        threshold: Option<f64>,
        /// Checkpoint to use (defaults to the latest trained stage).
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// Dataset to predict for (defaults to the held-out split in the data directory).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compute the metrics suite on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataDir,
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
    },
    /// Dump the learned action set as CSV and SVG.
    ExportActions {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataDir,
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// Number of held-out scenarios drawn as posterior panels.
        #[arg(long, default_value_t = 4)]
        scenarios: usize,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum StageArg {
    Base,
    Dual,
    Unified,
}

impl StageArg {
    fn stage(self) -> Stage {
        match self {
            StageArg::Base => Stage::Base,
            StageArg::Dual => Stage::Dual,
            StageArg::Unified => Stage::Unified,
        }
    }

    fn marker(self) -> StageMarker {
        match self {
            StageArg::Base => StageMarker::Base,
            StageArg::Dual => StageMarker::Dual,
            StageArg::Unified => StageMarker::Unified,
        }
    }

    fn checkpoint(self) -> &'static str {
        match self {
            StageArg::Base => "base.ckpt",
            StageArg::Dual => "dual.ckpt",
            StageArg::Unified => "unified.ckpt",
        }
    }

    /// Checkpoint this stage starts from.
    fn prerequisite(self) -> (&'static str, &'static str) {
        match self {
            StageArg::Base | StageArg::Unified => ("init.ckpt", "init-clusters"),
            StageArg::Dual => ("base.ckpt", "train --stage base"),
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModeArg {
    Prior,
    Posterior,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Missing { file: PathBuf, produced_by: &'static str },
    Locked(PathBuf),
    Core(actionset::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Core(e) if e.is_divergence() => 3,
            CliError::Core(actionset::Error::Config(_)) => 1,
            _ => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::Core(actionset::Error::Config(_)) => "config",
            CliError::Missing { .. } => "missing-prerequisite",
            CliError::Locked(_) => "locked",
            CliError::Core(e) if e.is_divergence() => "divergence",
            CliError::Core(actionset::Error::Io { .. }) => "io",
            CliError::Core(
                actionset::Error::Parse { .. } | actionset::Error::Schema { .. } | actionset::Error::Initialization(_),
            ) => "data",
            CliError::Core(_) => "model",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Missing { file, produced_by } => {
                write!(f, "missing prerequisite {} (run `{produced_by}` first)", file.display())
            }
            CliError::Locked(p) => write!(f, "run directory is locked by another invocation ({})", p.display()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<actionset::Error> for CliError {
    fn from(e: actionset::Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(actionset::Error::io(path, e))
}

/// One-line error record on stderr: `actionset: error[<kind>]: <message>`.
fn report(kind: &str, message: &str) {
    let flat: String = message
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ");
    eprintln!("actionset: error[{kind}]: {flat}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            report("usage", first);
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::from(e.exit_code())
        }
    }
}

/// Exclusive hold on a run directory for the lifetime of one command.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_path: Option<String>,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    tool_version: &'static str,
    config_digest: String,
}

/// Settings and run directory shared by one command invocation.
struct Context {
    cfg: PipelineConfig,
    config_path: Option<PathBuf>,
    out: PathBuf,
    data: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    _lock: DirLock,
}

impl Context {
    fn open(common: Common, data: Option<DataDir>) -> CliResult<Self> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
                PipelineConfig::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg = cfg.with_seed(seed);
        }
        cfg.validate()?;
        let lock = DirLock::acquire(&common.out)?;
        let data = data.and_then(|d| d.data).unwrap_or_else(|| common.out.clone());
        Ok(Self {
            cfg,
            config_path: common.config,
            out: common.out,
            data,
            inputs: Vec::new(),
            outputs: Vec::new(),
            _lock: lock,
        })
    }

    fn input(&mut self, path: PathBuf, produced_by: &'static str) -> CliResult<PathBuf> {
        if !path.is_file() {
            return Err(CliError::Missing {
                file: path,
                produced_by,
            });
        }
        self.inputs.push(path.clone());
        Ok(path)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn train_view(&mut self, name: &str) -> CliResult<Vec<TrainingSample>> {
        let path = self.input(self.data.join(name), "generate-data")?;
        Ok(read_training_view(&path, Some(self.cfg.train.horizon))?)
    }

    fn load(&mut self, name: &str, produced_by: &'static str) -> CliResult<Checkpoint> {
        let path = self.input(self.out.join(name), produced_by)?;
        Ok(checkpoint::load(&path, Some(&self.cfg.train))?)
    }

    fn save(&mut self, name: &str, stage: StageMarker, rng: RngState, model: ModelState) -> CliResult<()> {
        let path = self.output(name);
        let ckpt = Checkpoint {
            config: self.cfg.train.clone(),
            stage,
            rng,
            model,
        };
        Ok(checkpoint::save(&path, &ckpt)?)
    }

    fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.output(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))
    }

    /// Latest trained checkpoint, or the requested one.
    fn trained(&mut self, stage: Option<StageArg>) -> CliResult<(StageArg, Checkpoint)> {
        let pick = match stage {
            Some(s) => s,
            None => [StageArg::Unified, StageArg::Dual, StageArg::Base]
                .into_iter()
                .find(|s| self.out.join(s.checkpoint()).is_file())
                .ok_or_else(|| CliError::Missing {
                    file: self.out.join(StageArg::Base.checkpoint()),
                    produced_by: "train --stage base",
                })?,
        };
        let producer = match pick {
            StageArg::Base => "train --stage base",
            StageArg::Dual => "train --stage dual",
            StageArg::Unified => "train --stage unified",
        };
        let ckpt = self.load(pick.checkpoint(), producer)?;
        Ok((pick, ckpt))
    }

    fn finish(mut self, command: &str) -> CliResult<()> {
        let path = self.out.join(format!("{command}.manifest.json"));
        let show = |p: &PathBuf| p.display().to_string();
        let manifest = RunManifest {
            command,
            config_path: self.config_path.as_ref().map(show),
            seed: self.cfg.train.seed,
            inputs: self.inputs.iter().map(show).collect(),
            outputs: self.outputs.iter().map(show).collect(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config_digest: self.cfg.digest(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        self.outputs.clear();
        Ok(())
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenerateData { common } => {
            let mut ctx = Context::open(common, None)?;
            let data = generate_dataset(&ctx.cfg.generator)?;
            let (train, holdout) = split_holdout(data, ctx.cfg.generator.holdout_fraction);
            for (name, rows) in [(TRAIN_FILE, &train), (HOLDOUT_FILE, &holdout)] {
                let path = ctx.output(name);
                write_dataset(&path, rows)?;
            }
            println!(
                "wrote {} training and {} held-out samples to {}",
                train.len(),
                holdout.len(),
                ctx.out.display()
            );
            ctx.finish("generate-data")
        }
        Command::Pretrain { common, data } => {
            let mut ctx = Context::open(common, Some(data))?;
            let train = ctx.train_view(TRAIN_FILE)?;
            let holdout = ctx.train_view(HOLDOUT_FILE)?;
            let out = pretrain_vae(&ctx.cfg.train, &train, &holdout)?;
            let log = ctx.output("pretrain.log.csv");
            write_log(&log, &out.log)?;
            ctx.save(
                "pretrain.ckpt",
                StageMarker::Pretrained,
                RngState::capture(&out.rng),
                out.model,
            )?;
            println!("pretrained: held-out reconstruction ADE {:.4} m", out.holdout_ade);
            ctx.finish("pretrain")
        }
        Command::InitClusters { common, data } => {
            let mut ctx = Context::open(common, Some(data))?;
            let mut model = ctx.load("pretrain.ckpt", "pretrain")?.model;
            let train = ctx.train_view(TRAIN_FILE)?;
            let km = init_mixture(&mut model, &ctx.cfg.train, &train)?;
            let rng = RngState::capture(&stream_rng(ctx.cfg.train.seed, RngStream::KMeans));
            ctx.save("init.ckpt", StageMarker::Initialized, rng, model)?;
            println!(
                "initialized {} components from {} encoded samples",
                km.centroids.len(),
                km.assignments.len()
            );
            ctx.finish("init-clusters")
        }
        Command::Train { common, data, stage } => {
            let mut ctx = Context::open(common, Some(data))?;
            let (prereq, producer) = stage.prerequisite();
            let mut model = ctx.load(prereq, producer)?.model;
            let train = ctx.train_view(TRAIN_FILE)?;
            let (log, rng) = train_stage(&mut model, &ctx.cfg.train, stage.stage(), &train)?;
            let log_path = ctx.output(&format!("{}.log.csv", stage.stage().name()));
            write_log(&log_path, &log)?;
            ctx.save(stage.checkpoint(), stage.marker(), RngState::capture(&rng), model)?;
            if let Some(last) = log.last() {
                println!(
                    "trained {}: {} epochs, final objective {:.4}",
                    stage.stage().name(),
                    log.len(),
                    last.total
                );
            }
            ctx.finish(&format!("train-{}", stage.stage().name()))
        }
        Command::Predict {
            common,
            data,
            mode,
            threshold,
            stage,
            input,
        } => {
            let mut ctx = Context::open(common, Some(data))?;
            let threshold = threshold.unwrap_or(ctx.cfg.train.action_threshold);
            let (_, ckpt) = ctx.trained(stage)?;
            let input = input.unwrap_or_else(|| ctx.data.join(HOLDOUT_FILE));
            let input = ctx.input(input, "generate-data")?;
            let samples = read_training_view(&input, Some(ctx.cfg.train.horizon))?;
            let (mode, name) = match mode {
                ModeArg::Prior => (PredictionMode::Prior, "predictions-prior.jsonl"),
                ModeArg::Posterior => (PredictionMode::Posterior, "predictions-posterior.jsonl"),
            };
            let mut text = String::new();
            for s in &samples {
                let p = predict(&ckpt.model, &s.scenario, mode, threshold)?;
                let row = PredictionRow {
                    id: s.id,
                    actions: p
                        .actions
                        .iter()
                        .map(|a| ActionRow {
                            action: a.action,
                            probability: a.probability,
                            mean: a.mean.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
                        })
                        .collect(),
                };
                text.push_str(&serde_json::to_string(&row).expect("row serializes"));
                text.push('\n');
            }
            ctx.write(name, &text)?;
            println!("wrote {} predictions", samples.len());
            ctx.finish(&format!("predict-{}", mode.name()))
        }
        Command::Eval { common, data, stage } => {
            let mut ctx = Context::open(common, Some(data))?;
            let (pick, ckpt) = ctx.trained(stage)?;
            let path = ctx.input(ctx.data.join(HOLDOUT_FILE), "generate-data")?;
            let holdout = read_dataset(&path, Some(ctx.cfg.train.horizon))?;
            let report = metrics(&ckpt.model, &holdout, &eval_options(&ctx.cfg.train, pick.marker()))?;
            let text = report.to_toml();
            ctx.write("metrics.toml", &text)?;
            print!("{text}");
            ctx.finish("eval")
        }
        Command::ExportActions {
            common,
            data,
            stage,
            scenarios,
        } => {
            let mut ctx = Context::open(common, Some(data))?;
            let (_, ckpt) = ctx.trained(stage)?;
            let holdout = ctx.train_view(HOLDOUT_FILE)?;
            let m = &ckpt.model;
            let probs = marginal_action_probs(m, holdout.iter().map(|s| &s.scenario[..]))?;
            let mut panels = vec![Panel {
                title: "action set".into(),
                actions: action_set(m, Some(&probs))?,
                ground_truth: None,
            }];
            for s in holdout.iter().take(scenarios) {
                let p = predict(
                    m,
                    &s.scenario,
                    PredictionMode::Posterior,
                    ctx.cfg.train.action_threshold,
                )?;
                panels.push(Panel {
                    title: format!("scenario {}", s.id),
                    actions: p.actions,
                    ground_truth: Some(s.trajectory.clone()),
                });
            }
            export_plots(&ctx.out, "actions", &panels)?;
            ctx.output("actions.csv");
            ctx.output("actions.svg");
            println!("exported {} panels", panels.len());
            ctx.finish("export-actions")
        }
    }
}

#[derive(Serialize)]
struct ActionRow {
    action: usize,
    probability: f64,
    mean: Vec<[f64; 2]>,
}

#[derive(Serialize)]
struct PredictionRow {
    id: u64,
    actions: Vec<ActionRow>,
}
