//! Hyperparameters read from a TOML file and from flags; flags win.

use std::path::Path;

use clap::{Args, ValueEnum};
use dcsf::asts::{IndicatorKind, IndicatorScheme};
use dcsf::model::{ModelConfig, MultiClassLoss, TimeEmbedding};
use dcsf::train::{toy_preset, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Library defaults.
    Default,
    /// The two-channel toy task settings.
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeInput {
    Absolute,
    Delta,
    Sinusoidal,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Indicator {
    OneHot,
    Binary,
    Nominal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    Softmax,
    Sigmoid,
}

/// Every field is optional; unset fields fall back to the preset.
/// TOML keys are the snake_case field names.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub num_blocks: Option<usize>,
    #[arg(long)]
    pub filters_first: Option<usize>,
    #[arg(long)]
    pub filters_rest: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Replaces all three kernel lengths.
    #[arg(long)]
    pub kernel_length: Option<usize>,
    #[arg(long, value_enum)]
    pub time_input: Option<TimeInput>,
    #[arg(long, value_enum)]
    pub indicator: Option<Indicator>,
    #[arg(long)]
    pub causal: Option<bool>,
    #[arg(long)]
    pub batch_norm: Option<bool>,
    #[arg(long)]
    pub independent_encoders: Option<bool>,
    #[arg(long)]
    pub dense_layers: Option<usize>,
    #[arg(long)]
    pub dense_width: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub multiclass_loss: Option<Loss>,

    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub balanced_batching: Option<bool>,
    #[arg(long)]
    pub normalize_values: Option<bool>,
    #[arg(long)]
    pub online: Option<bool>,
}

macro_rules! overlay {
    ($flags:ident, $file:ident, $($field:ident),* $(,)?) => {
        Settings { $($field: $flags.$field.or($file.$field)),* }
    };
}

impl Settings {
    /// Reads `path` if given and lays `self` over it.
    pub fn resolve(self, path: Option<&Path>) -> Result<Settings, CliError> {
        let Some(path) = path else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: Settings = toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let flags = self;
        Ok(overlay!(
            flags,
            file,
            preset,
            seed,
            num_blocks,
            filters_first,
            filters_rest,
            embedding_dim,
            kernel_length,
            time_input,
            indicator,
            causal,
            batch_norm,
            independent_encoders,
            dense_layers,
            dense_width,
            dropout,
            multiclass_loss,
            learning_rate,
            batch_size,
            max_epochs,
            patience,
            balanced_batching,
            normalize_values,
            online,
        ))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Model and training configs for a dataset with `d` channels and `l`
    /// classes.
    pub fn build(&self, d: usize, l: usize) -> Result<(ModelConfig, TrainConfig), CliError> {
        let (mut model, mut train) = match self.preset.unwrap_or(Preset::Default) {
            Preset::Default => (ModelConfig::new(d, l), TrainConfig::default()),
            Preset::Toy => {
                let (mut m, t) = toy_preset(true);
                m.scheme = IndicatorScheme::one_hot(d);
                m.classifier.num_classes = l;
                (m, t)
            }
        };
        let e = &mut model.encoder;
        set(&mut e.num_blocks, self.num_blocks);
        set(&mut e.filters_first, self.filters_first);
        set(&mut e.filters_rest, self.filters_rest);
        set(&mut e.embedding_dim, self.embedding_dim);
        if self.kernel_length.is_some() {
            e.kernel_length_override = self.kernel_length;
        }
        if let Some(t) = self.time_input {
            e.time_embedding = match t {
                TimeInput::Absolute => TimeEmbedding::AbsoluteTime,
                TimeInput::Delta => TimeEmbedding::TimeDelta,
                TimeInput::Sinusoidal => TimeEmbedding::sinusoidal(),
                TimeInput::None => TimeEmbedding::None,
            };
        }
        set(&mut e.causal, self.causal);
        set(&mut e.use_batch_norm, self.batch_norm);
        set(&mut e.independent_encoders, self.independent_encoders);
        if let Some(kind) = self.indicator {
            let kind = match kind {
                Indicator::OneHot => IndicatorKind::OneHot,
                Indicator::Binary => IndicatorKind::Binary,
                Indicator::Nominal => IndicatorKind::Nominal,
            };
            model.scheme = IndicatorScheme::new(kind, d);
        }
        let c = &mut model.classifier;
        set(&mut c.num_dense_layers, self.dense_layers);
        set(&mut c.width, self.dense_width);
        set(&mut c.dropout, self.dropout);
        if let Some(loss) = self.multiclass_loss {
            model.multiclass_loss = match loss {
                Loss::Softmax => MultiClassLoss::Softmax,
                Loss::Sigmoid => MultiClassLoss::Sigmoid,
            };
        }

        set(&mut train.learning_rate, self.learning_rate);
        set(&mut train.batch_size, self.batch_size);
        set(&mut train.max_epochs, self.max_epochs);
        set(&mut train.patience, self.patience);
        set(&mut train.balanced_batching, self.balanced_batching);
        set(&mut train.normalize_values, self.normalize_values);
        set(&mut train.online, self.online);
        train.seed = self.seed();

        model.validate().map_err(CliError::usage)?;
        train.validate()?;
        Ok((model, train))
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
