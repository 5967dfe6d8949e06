//! Synthetic datasets: the two-channel coincidence task, and asynchronous
//! or gappy versions of regularly sampled series.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asts::{AsTsInstance, Channel, Dataset};

#[derive(Debug, Error, PartialEq)]
pub enum DatagenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Two channels of length `T`; positives spike in both channels at the same
/// step, negatives at different steps. `sparsity` removes that fraction of
/// each channel's zero-valued observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub length: usize,
    pub n: usize,
    pub sparsity: f64,
    pub seed: u64,
}

impl ToyConfig {
    pub fn new(length: usize, n: usize, sparsity: f64, seed: u64) -> Self {
        Self {
            length,
            n,
            sparsity,
            seed,
        }
    }

    /// Observations removed per channel, `floor(p * T)`.
    pub fn removed_per_channel(&self) -> usize {
        (self.sparsity * self.length as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.length < 2 {
            return Err(DatagenError::Config(format!(
                "series length must be at least 2, got {}",
                self.length
            )));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(DatagenError::Config(format!(
                "sparsity {} outside [0, 1)",
                self.sparsity
            )));
        }
        if self.removed_per_channel() >= self.length - 1 {
            return Err(DatagenError::Config(format!(
                "sparsity {} would leave only the spike of a length-{} channel",
                self.sparsity, self.length
            )));
        }
        Ok(())
    }
}

fn toy_channel<R: Rng + ?Sized>(id: usize, spike: usize, config: &ToyConfig, rng: &mut R) -> Channel {
    let t = config.length;
    let zeros: Vec<usize> = (0..t).filter(|&i| i != spike).collect();
    let mut dropped = vec![false; t];
    for k in index::sample(rng, zeros.len(), config.removed_per_channel()) {
        dropped[zeros[k]] = true;
    }
    let kept: Vec<usize> = (0..t).filter(|&i| !dropped[i]).collect();
    Channel::new(
        id,
        kept.iter().map(|&i| if i == spike { 1.0 } else { 0.0 }).collect(),
        kept.iter().map(|&i| i as f64).collect(),
    )
}

/// One toy instance; label 1 for the coinciding-spike class.
pub fn make_toy_instance<R: Rng + ?Sized>(
    positive: bool,
    config: &ToyConfig,
    rng: &mut R,
) -> Result<AsTsInstance, DatagenError> {
    config.validate()?;
    let t = config.length;
    let (s1, s2) = if positive {
        let s = rng.gen_range(0..t);
        (s, s)
    } else {
        let s1 = rng.gen_range(0..t);
        let mut s2 = rng.gen_range(0..t - 1);
        if s2 >= s1 {
            s2 += 1;
        }
        (s1, s2)
    };
    let c1 = toy_channel(1, s1, config, rng);
    let c2 = toy_channel(2, s2, config, rng);
    Ok(AsTsInstance {
        channels: vec![c1, c2],
        label: usize::from(positive),
    })
}

/// Per-instance generator stream derived from a master seed.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

const SHUFFLE_STREAM: u64 = u64::MAX;

/// `n / 2` instances of each class in seeded random order. An odd `n` is
/// rounded down.
pub fn make_toy_dataset(config: &ToyConfig) -> Result<Dataset, DatagenError> {
    config.validate()?;
    if config.n % 2 == 1 {
        log::warn!("odd instance count {} rounded down to {}", config.n, config.n - 1);
    }
    let half = config.n / 2;
    let mut instances = (0..2 * half)
        .map(|i| make_toy_instance(i < half, config, &mut instance_rng(config.seed, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    instances.shuffle(&mut instance_rng(config.seed, SHUFFLE_STREAM));
    Ok(Dataset::new(instances, 2, 2))
}

/// A fully observed `D x L` series with times `1..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularSeries {
    pub values: Vec<Vec<f64>>,
    pub label: usize,
}

impl RegularSeries {
    pub fn num_channels(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every observation, as an instance.
    pub fn to_instance(&self) -> AsTsInstance {
        self.keep(|_, _| true)
    }

    fn keep(&self, mut keep: impl FnMut(usize, usize) -> bool) -> AsTsInstance {
        let channels = self
            .values
            .iter()
            .enumerate()
            .map(|(d, row)| {
                let (times, values) = row
                    .iter()
                    .enumerate()
                    .filter(|&(t, _)| keep(d, t))
                    .map(|(t, &v)| ((t + 1) as f64, v))
                    .unzip();
                Channel::new(d + 1, values, times)
            })
            .collect();
        AsTsInstance::new(channels, self.label)
    }
}

/// Keeps exactly one uniformly chosen channel at every time step.
pub fn asynchronize<R: Rng + ?Sized>(series: &RegularSeries, rng: &mut R) -> AsTsInstance {
    let d = series.num_channels().max(1);
    let owner: Vec<usize> = (0..series.len()).map(|_| rng.gen_range(0..d)).collect();
    series.keep(|c, t| owner[t] == c)
}

/// Deletes `floor(p * D * L)` uniformly chosen observations; channels left
/// empty are omitted.
pub fn induce_missing<R: Rng + ?Sized>(
    series: &RegularSeries,
    p: f64,
    rng: &mut R,
) -> Result<AsTsInstance, DatagenError> {
    if !(0.0..1.0).contains(&p) {
        return Err(DatagenError::Config(format!("missing fraction {p} outside [0, 1)")));
    }
    let l = series.len();
    let total = series.num_channels() * l;
    let removed = (p * total as f64).floor() as usize;
    let mut dropped = vec![false; total];
    for k in index::sample(rng, total, removed) {
        dropped[k] = true;
    }
    Ok(series.keep(|d, t| !dropped[d * l + t]))
}

fn dataset_from(series: &[RegularSeries], instances: Vec<AsTsInstance>) -> Dataset {
    let d = series.iter().map(RegularSeries::num_channels).max().unwrap_or(0);
    let classes = series.iter().map(|s| s.label + 1).max().unwrap_or(0).max(2);
    Dataset::new(instances, d, classes)
}

pub fn asynchronize_all(series: &[RegularSeries], seed: u64) -> Dataset {
    let instances = series
        .iter()
        .enumerate()
        .map(|(i, s)| asynchronize(s, &mut instance_rng(seed, i as u64)))
        .collect();
    dataset_from(series, instances)
}

pub fn induce_missing_all(series: &[RegularSeries], p: f64, seed: u64) -> Result<Dataset, DatagenError> {
    let instances = series
        .iter()
        .enumerate()
        .map(|(i, s)| induce_missing(s, p, &mut instance_rng(seed, i as u64)))
        .collect::<Result<_, _>>()?;
    Ok(dataset_from(series, instances))
}

/// Parses a regular-series table.
///
/// ```text
/// # regular channels=<D> length=<L>
/// <label>,<x_1,1>,...,<x_1,L>,<x_2,1>,...,<x_D,L>
/// ```
///
/// Values are listed channel by channel. Blank lines and further lines
/// starting with `#` are ignored.
pub fn parse_regular_table(text: &str) -> Result<Vec<RegularSeries>, DatagenError> {
    let err = |line: usize, message: String| DatagenError::Parse { line, message };
    let mut lines = text.lines().enumerate();
    let (d, l) = loop {
        let Some((i, raw)) = lines.next() else {
            return Err(err(1, "missing '# regular' header".into()));
        };
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields = raw.split_whitespace();
        if fields.next() != Some("#") || fields.next() != Some("regular") {
            return Err(err(i + 1, "expected '# regular channels=<D> length=<L>'".into()));
        }
        let mut d = None;
        let mut l = None;
        for f in fields {
            let parsed = f.split_once('=').and_then(|(k, v)| Some((k, v.parse::<usize>().ok()?)));
            match parsed {
                Some(("channels", v)) if v > 0 => d = Some(v),
                Some(("length", v)) if v > 0 => l = Some(v),
                _ => return Err(err(i + 1, format!("bad header field {f:?}"))),
            }
        }
        match (d, l) {
            (Some(d), Some(l)) => break (d, l),
            _ => return Err(err(i + 1, "header needs channels= and length=".into())),
        }
    };
    let mut out = Vec::new();
    for (i, raw) in lines {
        let row = raw.trim();
        if row.is_empty() || row.starts_with('#') {
            continue;
        }
        let mut cells = row.split(',').map(str::trim);
        let label = cells
            .next()
            .and_then(|c| c.parse::<usize>().ok())
            .ok_or_else(|| err(i + 1, "invalid label".into()))?;
        let flat = cells
            .map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| err(i + 1, "invalid value".into()))?;
        if flat.len() != d * l {
            return Err(err(
                i + 1,
                format!("expected {} values, found {}", d * l, flat.len()),
            ));
        }
        out.push(RegularSeries {
            values: flat.chunks_exact(l).map(<[f64]>::to_vec).collect(),
            label,
        });
    }
    if out.is_empty() {
        return Err(err(1, "table has no rows".into()));
    }
    Ok(out)
}

pub fn write_regular_table(series: &[RegularSeries]) -> String {
    let d = series.first().map_or(0, RegularSeries::num_channels);
    let l = series.first().map_or(0, RegularSeries::len);
    let mut out = format!("# regular channels={d} length={l}\n");
    for s in series {
        out.push_str(&s.label.to_string());
        for v in s.values.iter().flatten() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}
