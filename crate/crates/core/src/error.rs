use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("undefined phase: sample {index} has zero magnitude")]
    UndefinedPhase { index: usize },

    #[error("no packet detected (peak correlation {confidence:.3} below floor {floor:.3})")]
    NoPacket { confidence: f64, floor: f64 },

    #[error("input too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("CFO database has no entry for device {0}")]
    DatabaseIntegrity(u32),

    #[error("compensation mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
