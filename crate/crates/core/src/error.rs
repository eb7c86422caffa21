use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geography: {0}")]
    Geography(String),

    #[error("unknown simulation setting `{0}`")]
    UnknownSetting(String),

    #[error("invalid frame configuration: {0}")]
    Frame(String),

    #[error("invalid sampling configuration: {0}")]
    Design(String),

    #[error("invalid distribution parameter: {0}")]
    Distribution(String),

    #[error("empty cluster set for area {0}")]
    EmptyDomain(usize),

    #[error("stratum {stratum} has a single sampled cluster; the between-cluster variance is undefined")]
    SingleClusterStratum { stratum: usize },

    #[error("area {area}: zero degrees of freedom (clusters = strata = {strata})")]
    ZeroDegreesOfFreedom { area: usize, strata: usize },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("degenerate eigensystem for area {0}")]
    DegenerateEigensystem(usize),

    #[error("graph is not connected")]
    Disconnected,

    #[error("invalid spatial structure: {0}")]
    Spatial(String),

    #[error("invalid model data: {0}")]
    ModelData(String),

    #[error("invalid MCMC configuration: {0}")]
    McmcConfig(String),

    #[error("invalid evaluation input: {0}")]
    Evaluation(String),

    #[error("invalid run configuration: {0}")]
    Config(String),

    #[error("{path}: row {row}: {message}")]
    Schema {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
