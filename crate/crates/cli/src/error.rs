use std::path::{Path, PathBuf};

use dapa_core::augment::AugmentError;
use dapa_core::datagen::DataError;
use dapa_core::nn::NnError;
use dapa_core::pose_prior::PriorError;
use dapa_core::regressor::RegressorError;
use dapa_core::trainer::{CheckpointError, TrainError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing {}: run `dapa-lab {producer}` first", path.display())]
    Missing { path: PathBuf, producer: &'static str },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn other(e: impl Into<anyhow::Error>) -> Self {
        CliError::Other(e.into())
    }
}

/// Fails with a missing-prerequisite error unless `path` exists.
pub fn require(path: &Path, producer: &'static str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            path: path.to_path_buf(),
            producer,
        })
    }
}

fn nn(e: NnError) -> CliError {
    match e {
        NnError::NonFinite(m) => CliError::Numerical(m),
        other => CliError::other(other),
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Numerical(e.to_string()),
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Nn(e) => nn(e),
            TrainError::Regressor(e) => e.into(),
            other => CliError::other(other),
        }
    }
}

impl From<RegressorError> for CliError {
    fn from(e: RegressorError) -> Self {
        match e {
            RegressorError::Nn(e) => nn(e),
            // Shape mismatches between a checkpoint and a dataset are setup errors.
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<PriorError> for CliError {
    fn from(e: PriorError) -> Self {
        match e {
            PriorError::Diverged { .. } => CliError::Numerical(e.to_string()),
            PriorError::Nn(e) => nn(e),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) | DataError::KeypointCount { .. } => CliError::Config(e.to_string()),
            other => CliError::other(other),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        CliError::other(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::other(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::other(e)
    }
}
