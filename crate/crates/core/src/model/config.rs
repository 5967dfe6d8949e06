use serde::{Deserialize, Serialize};

use crate::asts::{channel_to_array, Channel, ChannelIndexError, IndicatorScheme};
use crate::tensor::Tensor;

/// How observation times enter the encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TimeEmbedding {
    /// Normalised observation times as one row.
    AbsoluteTime,
    /// First differences of normalised times, first entry 0.
    TimeDelta,
    /// `sin(w_i t)` and `cos(w_i t)` rows with `w_i` geometrically spaced
    /// from 1 to `max_timescale`.
    Sinusoidal {
        frequencies: usize,
        max_timescale: f64,
    },
    /// No time rows; the encoder only sees indicator and values.
    None,
}

impl TimeEmbedding {
    pub fn rows(&self) -> usize {
        match *self {
            TimeEmbedding::AbsoluteTime | TimeEmbedding::TimeDelta => 1,
            TimeEmbedding::Sinusoidal { frequencies, .. } => 2 * frequencies,
            TimeEmbedding::None => 0,
        }
    }

    pub fn sinusoidal() -> Self {
        TimeEmbedding::Sinusoidal {
            frequencies: 4,
            max_timescale: 100.0,
        }
    }

    fn angular_frequencies(frequencies: usize, max_timescale: f64) -> Vec<f64> {
        (0..frequencies)
            .map(|i| {
                if frequencies == 1 {
                    1.0
                } else {
                    max_timescale.powf(i as f64 / (frequencies - 1) as f64)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Sum,
    /// Ablation only.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MultiClassLoss {
    Softmax,
    /// Independent per-class sigmoid cross entropy.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub filters_first: usize,
    pub filters_rest: usize,
    pub kernel_lengths: [usize; 3],
    /// Replaces every kernel length, e.g. 1 for point-wise online tasks.
    pub kernel_length_override: Option<usize>,
    pub embedding_dim: usize,
    pub time_embedding: TimeEmbedding,
    pub causal: bool,
    pub use_batch_norm: bool,
    pub independent_encoders: bool,
    pub aggregation: Aggregation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 1,
            filters_first: 64,
            filters_rest: 128,
            kernel_lengths: [8, 5, 3],
            kernel_length_override: None,
            embedding_dim: 128,
            time_embedding: TimeEmbedding::AbsoluteTime,
            causal: false,
            use_batch_norm: false,
            independent_encoders: false,
            aggregation: Aggregation::Sum,
        }
    }
}

impl EncoderConfig {
    pub fn include_time(&self) -> bool {
        self.time_embedding != TimeEmbedding::None
    }

    pub fn with_include_time(mut self, include_time: bool) -> Self {
        self.time_embedding = if include_time {
            TimeEmbedding::AbsoluteTime
        } else {
            TimeEmbedding::None
        };
        self
    }

    pub fn filters(&self, block: usize) -> usize {
        if block == 0 {
            self.filters_first
        } else {
            self.filters_rest
        }
    }

    pub fn kernel(&self, layer: usize) -> usize {
        self.kernel_length_override
            .unwrap_or(self.kernel_lengths[layer])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub num_dense_layers: usize,
    pub width: usize,
    pub dropout: f64,
    /// Number of classes `L`.
    pub num_classes: usize,
}

impl ClassifierConfig {
    /// One logit for binary tasks, otherwise one per class.
    pub fn output_dim(&self) -> usize {
        if self.num_classes == 2 {
            1
        } else {
            self.num_classes
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
    pub scheme: IndicatorScheme,
    pub multiclass_loss: MultiClassLoss,
}

impl ModelConfig {
    pub fn new(num_channels: usize, num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::default(),
            classifier: ClassifierConfig {
                num_dense_layers: 1,
                width: 128,
                dropout: 0.0,
                num_classes,
            },
            scheme: IndicatorScheme::one_hot(num_channels),
            multiclass_loss: MultiClassLoss::Softmax,
        }
    }

    /// Encoder input rows: indicator, value, then time rows.
    pub fn input_rows(&self) -> usize {
        self.scheme.dim() + 1 + self.encoder.time_embedding.rows()
    }

    pub fn num_encoders(&self) -> usize {
        if self.encoder.independent_encoders {
            self.scheme.num_channels
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let e = &self.encoder;
        if e.num_blocks == 0 || e.embedding_dim == 0 || e.filters_first == 0 || e.filters_rest == 0
        {
            return Err("encoder needs at least one block and non-zero widths".into());
        }
        if e.kernel_lengths.contains(&0) || e.kernel_length_override == Some(0) {
            return Err("kernel lengths must be at least 1".into());
        }
        let c = &self.classifier;
        if c.width == 0 {
            return Err("classifier width must be at least 1".into());
        }
        if !(0.0..1.0).contains(&c.dropout) {
            return Err(format!("dropout {} outside [0, 1)", c.dropout));
        }
        if c.num_classes < 2 {
            return Err("need at least two classes".into());
        }
        if self.scheme.num_channels == 0 {
            return Err("need at least one channel".into());
        }
        Ok(())
    }
}

/// Encoder input array for one channel under a time embedding.
pub fn channel_features(
    channel: &Channel,
    scheme: &IndicatorScheme,
    time_embedding: &TimeEmbedding,
) -> Result<Tensor, ChannelIndexError> {
    match *time_embedding {
        TimeEmbedding::AbsoluteTime => channel_to_array(channel, scheme, true),
        TimeEmbedding::None => channel_to_array(channel, scheme, false),
        TimeEmbedding::TimeDelta => {
            let mut deltas = channel.clone();
            deltas.times = std::iter::once(0.0)
                .chain(channel.times.windows(2).map(|w| w[1] - w[0]))
                .collect();
            channel_to_array(&deltas, scheme, true)
        }
        TimeEmbedding::Sinusoidal {
            frequencies,
            max_timescale,
        } => {
            let base = channel_to_array(channel, scheme, false)?;
            let len = channel.len();
            let rows = base.shape()[0] + 2 * frequencies;
            let mut data = base.into_data();
            for w in TimeEmbedding::angular_frequencies(frequencies, max_timescale) {
                data.extend(channel.times.iter().map(|t| (w * t).sin()));
                data.extend(channel.times.iter().map(|t| (w * t).cos()));
            }
            Ok(Tensor::new(vec![rows, len], data).expect("row count matches assembly"))
        }
    }
}
