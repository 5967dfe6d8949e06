//! Set-of-channels classifier: a shared residual convolutional encoder per
//! channel, sum aggregation, and a dense classifier.

mod batch;
mod config;
mod network;
mod params;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asts::{ChannelIndexError, TimeRange, ValueStats};
use crate::tensor::TensorError;

pub use batch::{global_steps, PaddedBatch, SubBatch};
pub use config::{
    channel_features, Aggregation, ClassifierConfig, EncoderConfig, ModelConfig, MultiClassLoss,
    TimeEmbedding,
};
pub use network::{
    aggregate, apply_norm_updates, classify, encode_channel, forward, forward_batch,
    forward_online, forward_online_batch, forward_padded, input_gradients, loss, loss_and_grads,
    online_loss_and_grads, penultimate_batch, relu_pattern, LossGradients, NormUpdate, OnlineOutput,
};
pub use params::{
    BlockParams, ClassifierParams, ConvParams, DenseParams, EncoderParams, ModelParams, NormParams,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Channel(#[from] ChannelIndexError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("instance {instance} has no channels")]
    NoChannels { instance: usize },
    #[error("{0}")]
    Usage(String),
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to reproduce predictions: the configuration, the
/// preprocessing fitted on training data, and the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub time_range: Option<TimeRange>,
    pub value_stats: Option<ValueStats>,
    pub params: ModelParams,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config,
            time_range: None,
            value_stats: None,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ckpt.version));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
