use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("timestep {timestep} outside schedule range 1..={max}")]
    TimestepOutOfRange { timestep: usize, max: usize },
    #[error("timestep {0} is not a student anchor")]
    NotAnAnchor(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("checkpoint member `{0}` is missing")]
    MissingMember(String),
    #[error("checkpoint member `{name}` is corrupt: {reason}")]
    CorruptMember { name: String, reason: String },
    #[error("checkpoint metadata mismatch on `{field}`: archive has {found}, expected {expected}")]
    VersionMismatch { field: String, found: String, expected: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::VersionMismatch { .. } => 2,
            Error::NonFinite { .. } => 3,
            _ => 1,
        }
    }
}
