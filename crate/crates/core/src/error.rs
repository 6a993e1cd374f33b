use std::path::PathBuf;

use thiserror::Error;

use crate::embedding::Mode;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid record: {0}")]
    Invalid(String),

    #[error("dangling passage ids: {}", .0.join(", "))]
    DanglingIds(Vec<String>),

    #[error("no hop-1 rank for queries: {}", .0.join(", "))]
    MissingRank(Vec<String>),

    #[error("vector file format error: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing embedding for '{id}' in {mode} mode")]
    MissingEmbedding { id: String, mode: Mode },

    #[error("{} required text(s) not embedded: {}", .0.len(), .0.join("; "))]
    MissingTexts(Vec<String>),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },

    #[error("provider error (status {status}): {body}")]
    Provider { status: u16, body: String },

    #[error("training labels contain a single class ({0})")]
    SingleClass(u8),

    #[error("training did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("model artifact error: {0}")]
    Model(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
