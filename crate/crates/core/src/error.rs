use std::path::PathBuf;

use mdlprune_autograd::AutogradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration; `path` names the offending field.
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    /// Operation not allowed in the model's current state.
    #[error("state error: {0}")]
    State(String),

    /// A file failed structural or checksum validation.
    #[error("integrity error in {path}: {msg}")]
    Integrity { path: PathBuf, msg: String },

    #[error("unknown domain {domain} (model has {domains})")]
    UnknownDomain { domain: usize, domains: usize },

    #[error("input shape {got:?} does not match the configured {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },

    #[error("degenerate layer {layer}: no channel is used by any domain")]
    DegenerateLayer { layer: usize },

    /// Invalid argument to a metric.
    #[error("metric error: {0}")]
    Metric(String),

    #[error("empty dataset for domain {0}")]
    EmptyDataset(usize),

    #[error(transparent)]
    Autograd(#[from] AutogradError),

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { path: path.into(), msg: msg.into() }
    }

    pub fn integrity(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Integrity { path: path.into(), msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
