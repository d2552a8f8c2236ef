//! CLI failures and their process exit codes.

use std::path::{Path, PathBuf};

use thiserror::Error;
use tslab::circuits::CircuitError;
use tslab::crosscoder::CrosscoderError;
use tslab::datagen::DatagenError;
use tslab::forecaster::ForecastError;
use tslab::geometry::GeometryError;
use tslab::metrics::MetricsError;
use tslab::model::ModelError;
use tslab::probe::ProbeError;
use tslab::tokenizer::TokenizerError;
use tslab::trainer::TrainError;
use tslab::transfer::TransferError;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_ARTIFACT: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact {0}")]
    Missing(PathBuf),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("bad artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Missing(_) => EXIT_MISSING,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Artifact { .. } => EXIT_ARTIFACT,
            CliError::Io { .. } | CliError::Failed(_) => EXIT_FAILURE,
        }
    }

    pub fn artifact(path: &Path, reason: impl Into<String>) -> Self {
        CliError::Artifact { path: path.to_path_buf(), reason: reason.into() }
    }

    /// Missing files become [`CliError::Missing`]; everything else is plain I/O.
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Io { path: path.to_path_buf(), source }
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

// ----------------------------------------------------------------------------
// Core error classification

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<ForecastError> for CliError {
    fn from(e: ForecastError) -> Self {
        match e {
            ForecastError::Grid(_) | ForecastError::Temperature(_) => CliError::Config(e.to_string()),
            ForecastError::Tokenizer(e) => e.into(),
            ForecastError::Model(e) => e.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => {
                CliError::Numerical(e.to_string())
            }
            TrainError::Model(e) => e.into(),
            TrainError::Forecast(e) => e.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::InvalidSpec(_) | DatagenError::InvalidCorpus(_) => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::RankZero | GeometryError::ZeroVariance | GeometryError::Numerics(_) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        match e {
            TransferError::Config(_) => CliError::Config(e.to_string()),
            TransferError::Train(e) => e.into(),
            TransferError::Datagen(e) => e.into(),
            TransferError::Geometry(e) => e.into(),
            TransferError::Metrics(e) => e.into(),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Config(_) => CliError::Config(e.to_string()),
            ProbeError::NonFinite { .. } | ProbeError::Numerics(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<CrosscoderError> for CliError {
    fn from(e: CrosscoderError) -> Self {
        match e {
            CrosscoderError::Config(_) => CliError::Config(e.to_string()),
            CrosscoderError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<CircuitError> for CliError {
    fn from(e: CircuitError) -> Self {
        match e {
            CircuitError::OutOfRange(_) => CliError::Config(e.to_string()),
            CircuitError::NonFiniteBaseline { .. } => CliError::Numerical(e.to_string()),
            CircuitError::Model(e) => e.into(),
            CircuitError::Train(e) => e.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}
