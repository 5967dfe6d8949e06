//! Line-delimited dataset files.
//!
//! ```text
//! file     := header "\n" line ("\n" line)* ["\n"]
//! line     := record | "#" comment
//! header   := "asts v1 D=" uint " L=" uint [" time_range=" real "," real]
//! record   := label (";" group)+
//! group    := channel ":" obs ("," obs)*
//! obs      := time "=" value
//! ```
//!
//! Comment lines carry provenance and are dropped on parsing.
//! Whitespace around tokens is ignored. Reals use Rust's shortest
//! round-trip formatting when written, so `load(save(d)) == d` exactly.
//! Non-finite numbers, empty groups and anything after the last
//! observation are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{AsTsInstance, Channel, Dataset, TimeRange, Violation};

const MAGIC: &str = "asts";
const VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("empty dataset")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("instance {instance}: {}", .violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid {
        instance: usize,
        violations: Vec<Violation>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn parse_err<T>(line: usize, message: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError::Parse {
        line,
        message: message.into(),
    })
}

fn parse_uint(s: &str, line: usize, what: &str) -> Result<usize, FormatError> {
    s.trim()
        .parse::<usize>()
        .or_else(|_| parse_err(line, format!("invalid {what} {:?}", s.trim())))
}

fn parse_real(s: &str, line: usize, what: &str) -> Result<f64, FormatError> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => parse_err(line, format!("invalid {what} {:?}", s.trim())),
    }
}

/// Serialises a dataset into the text format.
pub fn write_dataset(dataset: &Dataset) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "{MAGIC} {VERSION} D={} L={}",
        dataset.num_channels, dataset.num_classes
    );
    if let Some(r) = dataset.time_range {
        let _ = write!(out, " time_range={},{}", r.min, r.max);
    }
    out.push('\n');
    for inst in &dataset.instances {
        let _ = write!(out, "{}", inst.label);
        for c in &inst.channels {
            let _ = write!(out, "; {}:", c.id);
            for (i, (t, v)) in c.times.iter().zip(&c.values).enumerate() {
                let sep = if i == 0 { " " } else { ", " };
                let _ = write!(out, "{sep}{t}={v}");
            }
        }
        out.push('\n');
    }
    out
}

fn parse_header(line: &str) -> Result<(usize, usize, Option<TimeRange>), FormatError> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return parse_err(1, format!("header must start with {MAGIC:?}"));
    }
    match parts.next() {
        Some(VERSION) => {}
        other => return parse_err(1, format!("unsupported format version {other:?}")),
    }
    let mut d = None;
    let mut l = None;
    let mut range = None;
    for field in parts {
        let Some((key, value)) = field.split_once('=') else {
            return parse_err(1, format!("malformed header field {field:?}"));
        };
        match key {
            "D" if d.is_none() => d = Some(parse_uint(value, 1, "channel count")?),
            "L" if l.is_none() => l = Some(parse_uint(value, 1, "class count")?),
            "time_range" if range.is_none() => {
                let Some((lo, hi)) = value.split_once(',') else {
                    return parse_err(1, "time_range needs min,max");
                };
                range = Some(TimeRange {
                    min: parse_real(lo, 1, "time_range min")?,
                    max: parse_real(hi, 1, "time_range max")?,
                });
            }
            _ => return parse_err(1, format!("unexpected header field {field:?}")),
        }
    }
    match (d, l) {
        (Some(d), Some(l)) => Ok((d, l, range)),
        _ => parse_err(1, "header needs D= and L="),
    }
}

fn parse_record(text: &str, line: usize) -> Result<AsTsInstance, FormatError> {
    let mut pieces = text.split(';');
    let label = parse_uint(pieces.next().unwrap_or(""), line, "label")?;
    let mut channels = Vec::new();
    for group in pieces {
        let Some((id, obs)) = group.split_once(':') else {
            return parse_err(line, format!("channel group {:?} lacks ':'", group.trim()));
        };
        let id = parse_uint(id, line, "channel id")?;
        let mut values = Vec::new();
        let mut times = Vec::new();
        for pair in obs.split(',') {
            let Some((t, v)) = pair.split_once('=') else {
                return parse_err(line, format!("observation {:?} is not time=value", pair.trim()));
            };
            times.push(parse_real(t, line, "time")?);
            values.push(parse_real(v, line, "value")?);
        }
        channels.push(Channel::new(id, values, times));
    }
    if channels.is_empty() {
        return parse_err(line, "record has no channel groups");
    }
    channels.sort_by_key(|c| c.id);
    Ok(AsTsInstance { channels, label })
}

/// Parses and validates a dataset from text.
pub fn parse_dataset(text: &str) -> Result<Dataset, FormatError> {
    let mut lines = text.split('\n');
    let header = match lines.next() {
        Some(h) if !h.trim().is_empty() => h,
        _ => return Err(FormatError::Empty),
    };
    let (num_channels, num_classes, time_range) = parse_header(header)?;
    let body: Vec<&str> = lines.collect();
    let mut instances = Vec::with_capacity(body.len());
    for (i, raw) in body.iter().enumerate() {
        let line = i + 2;
        if raw.trim().is_empty() {
            if i + 1 == body.len() {
                break;
            }
            return parse_err(line, "blank line");
        }
        if raw.trim_start().starts_with('#') {
            continue;
        }
        instances.push(parse_record(raw, line)?);
    }
    if instances.is_empty() {
        return Err(FormatError::Empty);
    }
    let dataset = Dataset {
        instances,
        num_channels,
        num_classes,
        time_range,
    };
    dataset
        .validate()
        .map_err(|(instance, violations)| FormatError::Invalid {
            instance,
            violations,
        })?;
    Ok(dataset)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, FormatError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    fs::write(path, write_dataset(dataset)).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}
