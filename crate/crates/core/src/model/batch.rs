use crate::asts::AsTsInstance;
use crate::tensor::{Mask, Tensor};

use super::config::{channel_features, ModelConfig};
use super::ModelError;

/// Zero-padded channel arrays routed to one encoder.
#[derive(Debug, Clone)]
pub struct SubBatch {
    pub encoder: usize,
    /// `(M, rows, width)`
    pub features: Tensor,
    pub mask: Mask,
    /// `(instance, channel id)` of every sequence.
    pub owners: Vec<(usize, usize)>,
    /// Observation times of every sequence, unpadded.
    pub times: Vec<Vec<f64>>,
}

impl SubBatch {
    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// A batch of instances flattened into per-encoder channel sequences.
///
/// Sequences are laid out in instance order and, within an instance, in
/// ascending channel id, so every aggregation sums in the same order no
/// matter how the channels of an instance are stored.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub subs: Vec<SubBatch>,
    /// Per instance, the rows of the stacked `(total sequences, K)`
    /// embedding matrix that belong to it, in channel id order.
    pub groups: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl PaddedBatch {
    pub fn new(instances: &[&AsTsInstance], config: &ModelConfig) -> Result<Self, ModelError> {
        Self::with_extra_width(instances, config, 0)
    }

    /// Like [`PaddedBatch::new`] but with `extra` additional masked columns.
    pub fn with_extra_width(
        instances: &[&AsTsInstance],
        config: &ModelConfig,
        extra: usize,
    ) -> Result<Self, ModelError> {
        if instances.is_empty() {
            return Err(ModelError::Usage("empty batch".into()));
        }
        let rows = config.input_rows();
        let num_encoders = config.num_encoders();
        // (instance, channel id, features, times) per encoder
        let mut routed: Vec<Vec<(usize, usize, Tensor, Vec<f64>)>> = vec![Vec::new(); num_encoders];
        for (i, inst) in instances.iter().enumerate() {
            let mut channels: Vec<_> = inst.channels.iter().filter(|c| !c.is_empty()).collect();
            if channels.is_empty() {
                return Err(ModelError::NoChannels { instance: i });
            }
            channels.sort_by_key(|c| c.id);
            for pair in channels.windows(2) {
                if pair[0].id == pair[1].id {
                    return Err(ModelError::Usage(format!(
                        "instance {i} has channel {} twice",
                        pair[0].id
                    )));
                }
            }
            for c in channels {
                let features =
                    channel_features(c, &config.scheme, &config.encoder.time_embedding)?;
                let e = if num_encoders == 1 { 0 } else { c.id - 1 };
                routed[e].push((i, c.id, features, c.times.clone()));
            }
        }

        let mut subs = Vec::new();
        let mut row_of: Vec<Vec<(usize, usize)>> = vec![Vec::new(); instances.len()];
        let mut offset = 0;
        for (encoder, seqs) in routed.into_iter().enumerate() {
            if seqs.is_empty() {
                continue;
            }
            let width = seqs.iter().map(|s| s.2.shape()[1]).max().unwrap_or(0) + extra;
            let mut data = vec![0.0; seqs.len() * rows * width];
            let mut lengths = Vec::with_capacity(seqs.len());
            let mut owners = Vec::with_capacity(seqs.len());
            let mut times = Vec::with_capacity(seqs.len());
            for (m, (inst, id, feat, t)) in seqs.into_iter().enumerate() {
                let len = feat.shape()[1];
                for r in 0..rows {
                    let dst = (m * rows + r) * width;
                    data[dst..dst + len].copy_from_slice(&feat.data()[r * len..(r + 1) * len]);
                }
                lengths.push(len);
                row_of[inst].push((id, offset + m));
                owners.push((inst, id));
                times.push(t);
            }
            offset += owners.len();
            subs.push(SubBatch {
                encoder,
                features: Tensor::new(vec![owners.len(), rows, width], data)?,
                mask: Mask::from_lengths(lengths, width)?,
                owners,
                times,
            });
        }
        let groups = row_of
            .into_iter()
            .map(|mut g| {
                g.sort_unstable();
                g.into_iter().map(|(_, r)| r).collect()
            })
            .collect();
        Ok(Self {
            subs,
            groups,
            labels: instances.iter().map(|i| i.label).collect(),
        })
    }

    pub fn num_instances(&self) -> usize {
        self.groups.len()
    }

    pub fn num_sequences(&self) -> usize {
        self.subs.iter().map(|s| s.owners.len()).sum()
    }
}

/// Sorted distinct observation times of an instance: its global steps.
pub fn global_steps(instance: &AsTsInstance) -> Vec<f64> {
    let mut t: Vec<f64> = instance
        .channels
        .iter()
        .flat_map(|c| c.times.iter().copied())
        .collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}
