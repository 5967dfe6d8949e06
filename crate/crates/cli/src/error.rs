//! Exit codes: 0 success, 2 usage (bad flags, config or missing files),
//! 3 data (malformed or invalid inputs), 4 numeric (divergence, failed
//! gradient checks).

use std::fmt;

use dcsf::asts::FormatError;
use dcsf::datagen::DatagenError;
use dcsf::model::{CheckpointError, ModelError};
use dcsf::tensor::TensorError;
use dcsf::train::TrainError;

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: DATA, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: NUMERIC, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io { .. } => CliError::usage(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Config(_) => CliError::usage(e.to_string()),
            DatagenError::Parse { .. } => CliError::data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::usage(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

fn tensor_code(e: &TensorError) -> u8 {
    match e {
        TensorError::NonFinite(_) => NUMERIC,
        _ => DATA,
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            ModelError::Tensor(t) => tensor_code(t),
            ModelError::Config(_) | ModelError::Usage(_) => USAGE,
            ModelError::Channel(_) | ModelError::NoChannels { .. } => DATA,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Config(_) => CliError::usage(e.to_string()),
            TrainError::Stratification { .. } | TrainError::Metric(_) => CliError::data(e.to_string()),
            TrainError::Divergence { .. } => CliError::numeric(e.to_string()),
        }
    }
}

pub fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("io error on {}: {e}", path.display()))
}
