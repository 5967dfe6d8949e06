//! Asynchronous time series as sets of channels.
//!
//! An instance is a set of [`Channel`]s, each holding the observations of
//! one variable at its own times. Channels are stored in ascending id order
//! so serialisation is deterministic; nothing downstream depends on it.

mod format;

pub use format::{load_dataset, parse_dataset, save_dataset, write_dataset, FormatError};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// One set element: the observations of channel `id` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub id: usize,
    pub values: Vec<f64>,
    pub times: Vec<f64>,
}

impl Channel {
    pub fn new(id: usize, values: Vec<f64>, times: Vec<f64>) -> Self {
        Self { id, values, times }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndicatorKind {
    OneHot,
    Binary,
    Nominal,
}

/// How channel identity is encoded in every input column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorScheme {
    pub kind: IndicatorKind,
    pub num_channels: usize,
}

impl IndicatorScheme {
    pub fn new(kind: IndicatorKind, num_channels: usize) -> Self {
        Self { kind, num_channels }
    }

    pub fn one_hot(num_channels: usize) -> Self {
        Self::new(IndicatorKind::OneHot, num_channels)
    }

    /// Indicator length `P`. Binary uses `ceil(log2 D)` bits, at least one.
    pub fn dim(&self) -> usize {
        match self.kind {
            IndicatorKind::OneHot => self.num_channels,
            IndicatorKind::Binary => {
                let bits = usize::BITS - self.num_channels.saturating_sub(1).leading_zeros();
                (bits as usize).max(1)
            }
            IndicatorKind::Nominal => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("channel {channel} outside 1..={num_channels}")]
pub struct ChannelIndexError {
    pub channel: usize,
    pub num_channels: usize,
}

/// Indicator vector of channel `d` (1-based).
pub fn encode_channel_indicator(
    d: usize,
    scheme: &IndicatorScheme,
) -> Result<Vec<f64>, ChannelIndexError> {
    if d == 0 || d > scheme.num_channels {
        return Err(ChannelIndexError {
            channel: d,
            num_channels: scheme.num_channels,
        });
    }
    let p = scheme.dim();
    Ok(match scheme.kind {
        IndicatorKind::OneHot => {
            let mut v = vec![0.0; p];
            v[d - 1] = 1.0;
            v
        }
        IndicatorKind::Binary => (0..p)
            .map(|bit| (((d - 1) >> (p - 1 - bit)) & 1) as f64)
            .collect(),
        IndicatorKind::Nominal => vec![d as f64],
    })
}

/// `(P + 2) x |T|` array whose column `t` is `[M_d, V_t, T_t]`; the time row
/// is dropped when `include_time` is false.
pub fn channel_to_array(
    channel: &Channel,
    scheme: &IndicatorScheme,
    include_time: bool,
) -> Result<Tensor, ChannelIndexError> {
    let indicator = encode_channel_indicator(channel.id, scheme)?;
    let len = channel.len();
    let rows = indicator.len() + 1 + usize::from(include_time);
    let mut data = Vec::with_capacity(rows * len);
    for &m in &indicator {
        data.extend(std::iter::repeat(m).take(len));
    }
    data.extend_from_slice(&channel.values);
    if include_time {
        data.extend_from_slice(&channel.times);
    }
    Ok(Tensor::new(vec![rows, len], data).expect("row count matches assembly"))
}

/// A labelled set of channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsTsInstance {
    pub channels: Vec<Channel>,
    pub label: usize,
}

impl AsTsInstance {
    /// Drops channels without observations and sorts by channel id.
    pub fn new(channels: Vec<Channel>, label: usize) -> Self {
        let mut channels: Vec<Channel> = channels.into_iter().filter(|c| !c.is_empty()).collect();
        channels.sort_by_key(|c| c.id);
        Self { channels, label }
    }

    pub fn num_observations(&self) -> usize {
        self.channels.iter().map(Channel::len).sum()
    }

    pub fn channel(&self, id: usize) -> Option<&Channel> {
        self.channels.iter().find(|c| c.id == id)
    }

    pub fn max_len(&self) -> usize {
        self.channels.iter().map(Channel::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoChannels,
    EmptyChannel { channel: usize },
    LengthMismatch { channel: usize, values: usize, times: usize },
    NonMonotoneTimes { channel: usize, position: usize },
    NonFinite { channel: usize },
    DuplicateChannel { channel: usize },
    ChannelOutOfRange { channel: usize, num_channels: usize },
    LabelOutOfRange { label: usize, num_classes: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoChannels => write!(f, "no channels"),
            Violation::EmptyChannel { channel } => write!(f, "empty channel {channel}"),
            Violation::LengthMismatch {
                channel,
                values,
                times,
            } => write!(
                f,
                "length mismatch in channel {channel}: {values} values, {times} times"
            ),
            Violation::NonMonotoneTimes { channel, position } => {
                write!(f, "non-monotone times in channel {channel} at position {position}")
            }
            Violation::NonFinite { channel } => write!(f, "non-finite entry in channel {channel}"),
            Violation::DuplicateChannel { channel } => write!(f, "duplicate channel {channel}"),
            Violation::ChannelOutOfRange {
                channel,
                num_channels,
            } => write!(f, "channel {channel} outside 1..={num_channels}"),
            Violation::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} outside 0..{num_classes}")
            }
        }
    }
}

/// Every invariant the instance violates; empty when well formed.
pub fn validate(instance: &AsTsInstance, num_channels: usize, num_classes: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    if instance.channels.is_empty() {
        out.push(Violation::NoChannels);
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in &instance.channels {
        if !seen.insert(c.id) {
            out.push(Violation::DuplicateChannel { channel: c.id });
        }
        if c.id == 0 || c.id > num_channels {
            out.push(Violation::ChannelOutOfRange {
                channel: c.id,
                num_channels,
            });
        }
        if c.values.len() != c.times.len() {
            out.push(Violation::LengthMismatch {
                channel: c.id,
                values: c.values.len(),
                times: c.times.len(),
            });
        }
        if c.values.is_empty() {
            out.push(Violation::EmptyChannel { channel: c.id });
        }
        if c.values.iter().chain(&c.times).any(|v| !v.is_finite()) {
            out.push(Violation::NonFinite { channel: c.id });
        }
        if let Some(position) = c.times.windows(2).position(|w| w[1] < w[0]) {
            out.push(Violation::NonMonotoneTimes {
                channel: c.id,
                position: position + 1,
            });
        }
    }
    if instance.label >= num_classes {
        out.push(Violation::LabelOutOfRange {
            label: instance.label,
            num_classes,
        });
    }
    out
}

/// Raw time bounds used for min-max scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeRange {
    pub min: f64,
    pub max: f64,
}

impl TimeRange {
    pub fn scale(&self, t: f64) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            (t - self.min) / span
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<AsTsInstance>,
    pub num_channels: usize,
    pub num_classes: usize,
    /// Set once times have been min-max scaled.
    pub time_range: Option<TimeRange>,
}

impl Dataset {
    pub fn new(instances: Vec<AsTsInstance>, num_channels: usize, num_classes: usize) -> Self {
        Self {
            instances,
            num_channels,
            num_classes,
            time_range: None,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.num_classes == 2
    }

    /// Global time bounds over every observation.
    pub fn observed_time_range(&self) -> Option<TimeRange> {
        let mut times = self
            .instances
            .iter()
            .flat_map(|i| i.channels.iter().flat_map(|c| c.times.iter().copied()));
        let first = times.next()?;
        let (min, max) = times.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t)));
        Some(TimeRange { min, max })
    }

    /// Same dataset with a subset of instances.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            num_channels: self.num_channels,
            num_classes: self.num_classes,
            time_range: self.time_range,
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    /// Keeps only channel `d`; returns the dataset and how many instances
    /// were skipped because they lacked it.
    pub fn restrict_to_channel(&self, d: usize) -> (Dataset, usize) {
        let mut skipped = 0;
        let instances = self
            .instances
            .iter()
            .filter_map(|inst| match inst.channel(d) {
                Some(c) => Some(AsTsInstance::new(vec![c.clone()], inst.label)),
                None => {
                    skipped += 1;
                    None
                }
            })
            .collect();
        (
            Dataset {
                instances,
                num_channels: self.num_channels,
                num_classes: self.num_classes,
                time_range: self.time_range,
            },
            skipped,
        )
    }

    pub fn validate(&self) -> Result<(), (usize, Vec<Violation>)> {
        for (i, inst) in self.instances.iter().enumerate() {
            let v = validate(inst, self.num_channels, self.num_classes);
            if !v.is_empty() {
                return Err((i, v));
            }
        }
        Ok(())
    }
}

/// Min-max scales every time to `[0, 1]` with dataset-global bounds. A
/// degenerate range maps every time to 0.
pub fn normalize_times(dataset: &Dataset) -> Dataset {
    match dataset.observed_time_range() {
        Some(range) => apply_time_range(dataset, range),
        None => dataset.clone(),
    }
}

/// Scales times with previously fitted bounds (e.g. from the training split).
pub fn apply_time_range(dataset: &Dataset, range: TimeRange) -> Dataset {
    let mut out = dataset.clone();
    for c in out.instances.iter_mut().flat_map(|i| i.channels.iter_mut()) {
        c.times.iter_mut().for_each(|t| *t = range.scale(*t));
    }
    out.time_range = Some(range);
    out
}

/// Per-channel mean and standard deviation of observed values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValueStats {
    pub per_channel: BTreeMap<usize, (f64, f64)>,
}

impl ValueStats {
    pub fn fit(dataset: &Dataset) -> Self {
        let mut acc: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
        for c in dataset.instances.iter().flat_map(|i| &i.channels) {
            let e = acc.entry(c.id).or_default();
            for &v in &c.values {
                e.0 += v;
                e.1 += v * v;
                e.2 += 1;
            }
        }
        let per_channel = acc
            .into_iter()
            .map(|(id, (s, ss, n))| {
                let mean = s / n as f64;
                let var = (ss / n as f64 - mean * mean).max(0.0);
                let std = if var > 1e-24 { var.sqrt() } else { 1.0 };
                (id, (mean, std))
            })
            .collect();
        Self { per_channel }
    }

    /// Z-normalises channel values; channels unseen during fitting pass through.
    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        let mut out = dataset.clone();
        for c in out.instances.iter_mut().flat_map(|i| i.channels.iter_mut()) {
            if let Some(&(mean, std)) = self.per_channel.get(&c.id) {
                c.values.iter_mut().for_each(|v| *v = (*v - mean) / std);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(channels: Vec<Channel>, label: usize) -> AsTsInstance {
        AsTsInstance::new(channels, label)
    }

    #[test]
    fn indicator_examples() {
        assert_eq!(
            encode_channel_indicator(2, &IndicatorScheme::one_hot(3)).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(
            encode_channel_indicator(3, &IndicatorScheme::new(IndicatorKind::Binary, 4)).unwrap(),
            vec![1.0, 0.0]
        );
        assert_eq!(
            encode_channel_indicator(3, &IndicatorScheme::new(IndicatorKind::Nominal, 7)).unwrap(),
            vec![3.0]
        );
        assert!(encode_channel_indicator(0, &IndicatorScheme::one_hot(3)).is_err());
        assert!(encode_channel_indicator(4, &IndicatorScheme::one_hot(3)).is_err());
    }

    #[test]
    fn indicator_dims() {
        assert_eq!(IndicatorScheme::new(IndicatorKind::Binary, 4).dim(), 2);
        assert_eq!(IndicatorScheme::new(IndicatorKind::Binary, 5).dim(), 3);
        assert_eq!(IndicatorScheme::new(IndicatorKind::Binary, 1).dim(), 1);
        assert_eq!(IndicatorScheme::new(IndicatorKind::Binary, 37).dim(), 6);
        assert_eq!(IndicatorScheme::one_hot(37).dim(), 37);
    }

    #[test]
    fn channel_array_columns() {
        let ch = Channel::new(2, vec![0.5, 0.7], vec![0.1, 0.9]);
        let scheme = IndicatorScheme::one_hot(3);
        let a = channel_to_array(&ch, &scheme, true).unwrap();
        assert_eq!(a.shape(), &[5, 2]);
        let col = |t: usize| (0..5).map(|r| a.at(&[r, t])).collect::<Vec<_>>();
        assert_eq!(col(0), vec![0.0, 1.0, 0.0, 0.5, 0.1]);
        assert_eq!(col(1), vec![0.0, 1.0, 0.0, 0.7, 0.9]);

        let b = channel_to_array(&ch, &scheme, false).unwrap();
        assert_eq!(b.shape(), &[4, 2]);
        assert_eq!((0..4).map(|r| b.at(&[r, 1])).collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 0.7]);

        let single = Channel::new(1, vec![3.0], vec![0.0]);
        assert_eq!(channel_to_array(&single, &scheme, true).unwrap().shape(), &[5, 1]);
    }

    #[test]
    fn normalization_is_global() {
        let ds = Dataset::new(
            vec![
                inst(vec![Channel::new(1, vec![1.0, 2.0], vec![0.0, 5.0])], 0),
                inst(vec![Channel::new(1, vec![1.0], vec![10.0])], 1),
            ],
            1,
            2,
        );
        let n = normalize_times(&ds);
        assert_eq!(n.instances[0].channels[0].times, vec![0.0, 0.5]);
        assert_eq!(n.instances[1].channels[0].times, vec![1.0]);
        assert_eq!(n.time_range, Some(TimeRange { min: 0.0, max: 10.0 }));

        let shared = Dataset::new(
            vec![
                inst(vec![Channel::new(1, vec![1.0, 2.0], vec![2.0, 3.0])], 0),
                inst(vec![Channel::new(1, vec![1.0], vec![4.0])], 1),
            ],
            1,
            2,
        );
        assert_eq!(normalize_times(&shared).instances[0].channels[0].times, vec![0.0, 0.5]);
    }

    #[test]
    fn degenerate_range_maps_to_zero() {
        let ds = Dataset::new(
            vec![inst(vec![Channel::new(1, vec![1.0, 2.0], vec![3.0, 3.0])], 0)],
            1,
            1,
        );
        assert_eq!(normalize_times(&ds).instances[0].channels[0].times, vec![0.0, 0.0]);
    }

    #[test]
    fn validation_reports_each_violation() {
        let good = inst(vec![Channel::new(1, vec![1.0, 2.0], vec![0.0, 1.0])], 0);
        assert!(validate(&good, 2, 2).is_empty());

        let bad_len = AsTsInstance {
            channels: vec![Channel::new(1, vec![1.0, 2.0], vec![0.0, 0.5, 1.0])],
            label: 0,
        };
        let v = validate(&bad_len, 2, 2);
        assert!(v[0].to_string().contains("length mismatch"), "{v:?}");

        let bad_time = inst(vec![Channel::new(1, vec![1.0, 2.0], vec![0.5, 0.3])], 0);
        let v = validate(&bad_time, 2, 2);
        assert!(v[0].to_string().contains("non-monotone times"));

        let many = AsTsInstance {
            channels: vec![
                Channel::new(1, vec![1.0], vec![0.0]),
                Channel::new(1, vec![1.0], vec![0.0]),
                Channel::new(5, vec![1.0], vec![0.0]),
            ],
            label: 9,
        };
        let v = validate(&many, 2, 2);
        assert!(v.contains(&Violation::DuplicateChannel { channel: 1 }));
        assert!(v.contains(&Violation::ChannelOutOfRange {
            channel: 5,
            num_channels: 2
        }));
        assert!(v.contains(&Violation::LabelOutOfRange {
            label: 9,
            num_classes: 2
        }));
    }

    #[test]
    fn empty_channels_are_omitted() {
        let i = inst(
            vec![Channel::new(3, vec![1.0], vec![0.0]), Channel::new(1, vec![], vec![])],
            0,
        );
        assert_eq!(i.channels.len(), 1);
        assert_eq!(i.channels[0].id, 3);
    }

    #[test]
    fn value_stats_standardise_per_channel() {
        let ds = Dataset::new(
            vec![inst(
                vec![
                    Channel::new(1, vec![1.0, 3.0], vec![0.0, 1.0]),
                    Channel::new(2, vec![5.0, 5.0], vec![0.0, 1.0]),
                ],
                0,
            )],
            2,
            1,
        );
        let stats = ValueStats::fit(&ds);
        let z = stats.apply(&ds);
        assert_eq!(z.instances[0].channels[0].values, vec![-1.0, 1.0]);
        assert_eq!(z.instances[0].channels[1].values, vec![0.0, 0.0]);
    }
}
