use std::path::PathBuf;

use thiserror::Error;

use crate::scene::Role;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scene has no ego track")]
    MissingEgo,
    #[error("{role:?} track has {len} frames, expected {expected}")]
    LengthMismatch {
        role: Role,
        len: usize,
        expected: usize,
    },
    #[error("{role:?} track does not cover the ego's frames (frame {frame} differs)")]
    FrameMismatch { role: Role, frame: usize },
    #[error("invalid scene {scene_id}: {reason}")]
    InvalidScene { scene_id: String, reason: String },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("frames are not strictly increasing for vehicle {0}")]
    NonMonotoneFrames(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("residual set is empty")]
    EmptyResiduals,
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    SeriesLengthMismatch(usize, usize),
    #[error("statistic undefined: zero variance")]
    ZeroVariance,
    #[error("scene sets differ: {0}")]
    SceneSetMismatch(String),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("run directory {dir} is incomplete: missing {missing}")]
    IncompleteRun { dir: PathBuf, missing: String },
    #[error("stage `{stage}` failed: {cause}")]
    StageFailure { stage: String, cause: Box<Error> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Serialize(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: impl Into<String>, cause: Error) -> Self {
        Error::StageFailure {
            stage: stage.into(),
            cause: Box::new(cause),
        }
    }
}
