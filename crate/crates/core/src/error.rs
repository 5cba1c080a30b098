use std::path::PathBuf;

use chunklab_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid horizon: {0}")]
    InvalidHorizon(String),
    #[error("invalid delay: {0}")]
    InvalidDelay(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("episode over at tick {0}")]
    EpisodeOver(u64),
    #[error("expert demonstration rejected for seed {0}")]
    DemoRejected(u64),
    #[error("index {index} out of range for trajectory of length {len}")]
    Index { index: usize, len: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("quantization factor must be >= 1, got {0}")]
    InvalidQuantization(usize),
    #[error("trajectory {traj} violates delta consistency at step {step}")]
    DeltaConsistency { traj: usize, step: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("infeasible schedule: delay {delta} exceeds execution horizon {k}")]
    InfeasibleSchedule { delta: usize, k: usize },
    #[error("frozen prefix of {prefix} actions exceeds horizon {horizon}")]
    PrefixTooLong { prefix: usize, horizon: usize },
    #[error("reaction latency undefined: task has no events")]
    NoEvent,
    #[error("missing artifact: {0}")]
    Missing(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
