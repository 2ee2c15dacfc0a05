use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation in {context}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation in {context}: index {index} out of range 0..{len}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        len: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate posterior: no action has nonzero prior mass")]
    DegeneratePosterior,

    #[error("objective evaluation produced a non-finite value in term `{term}`")]
    NonFiniteObjective { term: &'static str },

    #[error("training diverged: non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("training diverged during stage {stage} at epoch {epoch} (last finite epoch: {last_finite:?})")]
    Divergence {
        stage: String,
        epoch: usize,
        last_finite: Option<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cluster initialization failed: {0}")]
    Initialization(String),

    #[error("model state error: {0}")]
    ModelState(String),

    #[error("pretraining gate not met: held-out reconstruction ADE {ade:.4} m exceeds {gate:.4} m")]
    GateNotMet { ade: f64, gate: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match configuration: {0}")]
    ConfigMismatch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that signal numerical divergence during training.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteObjective { .. }
        )
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { context, expected, got })
    }
}

pub(crate) fn check_index(context: &'static str, index: usize, len: usize) -> Result<()> {
    if index < len {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange { context, index, len })
    }
}
