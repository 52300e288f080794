use std::path::PathBuf;

use crate::hexgrid::HexCoord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cell out of arena: ({}, {})", .0.q, .0.r)]
    CellOutOfArena(HexCoord),
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),
    #[error("no valid predator spawn")]
    NoPredatorSpawn,
    #[error("episode finished")]
    EpisodeFinished,
    #[error("empty replay buffer")]
    EmptyBuffer,
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("trajectory {id}: point ({x:.4}, {y:.4}) outside arena")]
    PointOutsideArena { id: u64, x: f64, y: f64 },
    #[error("policy support outside the action set: {0}")]
    PolicySupport(String),
    #[error("schema version mismatch: file has {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("ingest: {0}")]
    Ingest(String),
    #[error("map mismatch: {0} vs {1}")]
    MapMismatch(String, String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("retryable parse error: {0}")]
    RetryableParse(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("episode aborted: {0}")]
    Aborted(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the command line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::CellOutOfArena(_) => "cell_out_of_arena",
            Error::InvalidMap(_) => "invalid_map",
            Error::InvalidConfig(_) => "invalid_config",
            Error::UnknownConfigKey(_) => "unknown_config_key",
            Error::NoPredatorSpawn => "no_predator_spawn",
            Error::EpisodeFinished => "episode_finished",
            Error::EmptyBuffer => "empty_buffer",
            Error::EmptyTrajectory => "empty_trajectory",
            Error::PointOutsideArena { .. } => "point_outside_arena",
            Error::PolicySupport(_) => "policy_support",
            Error::SchemaVersion { .. } => "schema_version",
            Error::Parse { .. } => "parse",
            Error::Ingest(_) => "ingest",
            Error::MapMismatch(..) => "map_mismatch",
            Error::CheckpointMismatch(_) => "checkpoint_mismatch",
            Error::RetryableParse(_) => "retryable_parse",
            Error::Transport(_) => "transport",
            Error::Aborted(_) => "aborted",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Toml(_) => "toml",
        }
    }
}
