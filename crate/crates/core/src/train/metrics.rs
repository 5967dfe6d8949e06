use serde::{Deserialize, Serialize};

use crate::asts::Dataset;
use crate::model::{forward_batch, forward_online_batch, ModelConfig, ModelParams, MultiClassLoss, OnlineOutput};
use crate::tensor::{loss_binary_ce, loss_softmax_ce};

use super::TrainError;

/// Instances per inference pass.
pub const EVAL_CHUNK: usize = 256;

/// Class predicted from a logit vector; a single logit means class 1 when
/// positive.
pub fn predict_class(logits: &[f64]) -> usize {
    if logits.len() == 1 {
        return usize::from(logits[0] > 0.0);
    }
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

/// Score ranking class 1 above class 0.
pub fn positive_score(logits: &[f64]) -> f64 {
    if logits.len() == 1 {
        logits[0]
    } else {
        logits[1] - logits[0]
    }
}

/// Probability that a random positive (label 1) outscores a random
/// negative, ties counting one half.
pub fn evaluate_auroc(labels: &[usize], scores: &[f64]) -> Result<f64, TrainError> {
    if labels.len() != scores.len() {
        return Err(TrainError::Metric(format!(
            "{} labels for {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(TrainError::Metric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut negatives_below, mut positives, mut negatives) = (0u64, 0u64, 0u64);
    // twice the Mann-Whitney U, kept integral so the result is exact
    let mut twice_u: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += 2 * u128::from(p) * u128::from(negatives_below) + u128::from(p) * u128::from(n);
        negatives_below += n;
        positives += p;
        negatives += n;
        i = j;
    }
    if positives == 0 || negatives == 0 {
        return Err(TrainError::Metric("AUROC needs both classes".into()));
    }
    Ok(twice_u as f64 / (2 * u128::from(positives) * u128::from(negatives)) as f64)
}

pub fn evaluate_accuracy(labels: &[usize], logits: &[Vec<f64>]) -> Result<f64, TrainError> {
    if labels.is_empty() || labels.len() != logits.len() {
        return Err(TrainError::Metric(format!(
            "{} labels for {} predictions",
            labels.len(),
            logits.len()
        )));
    }
    let correct = labels
        .iter()
        .zip(logits)
        .filter(|(&y, z)| predict_class(z) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy over every step of every instance.
pub fn evaluate_online(labels: &[usize], outputs: &[OnlineOutput]) -> Result<f64, TrainError> {
    if labels.len() != outputs.len() {
        return Err(TrainError::Metric("one label per online output needed".into()));
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for (&y, out) in labels.iter().zip(outputs) {
        total += out.logits.len();
        correct += out.logits.iter().filter(|z| predict_class(z) == y).count();
    }
    if total == 0 {
        return Err(TrainError::Metric("no online steps".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Cross entropy of one prediction, matching the training objective.
pub fn prediction_loss(label: usize, logits: &[f64], config: &ModelConfig) -> Result<f64, TrainError> {
    Ok(if logits.len() == 1 {
        loss_binary_ce(if label == 1 { 1.0 } else { 0.0 }, logits[0])?
    } else {
        match config.multiclass_loss {
            MultiClassLoss::Softmax => loss_softmax_ce(label, logits)?,
            MultiClassLoss::Sigmoid => logits
                .iter()
                .enumerate()
                .map(|(c, &z)| loss_binary_ce(if c == label { 1.0 } else { 0.0 }, z))
                .sum::<Result<f64, _>>()?,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Binary tasks only.
    pub auroc: Option<f64>,
    pub loss: f64,
    /// Per-step accuracy of online models.
    pub online_accuracy: Option<f64>,
    pub seconds: f64,
}

impl Metrics {
    /// AUROC for binary tasks, accuracy otherwise.
    pub fn primary(&self) -> f64 {
        self.auroc.unwrap_or(self.accuracy)
    }
}

pub fn predict(dataset: &Dataset, params: &ModelParams, config: &ModelConfig) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.instances.chunks(EVAL_CHUNK) {
        let refs: Vec<_> = chunk.iter().collect();
        out.extend(forward_batch(&refs, params, config)?);
    }
    Ok(out)
}

pub fn predict_online(
    dataset: &Dataset,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<OnlineOutput>, TrainError> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.instances.chunks(EVAL_CHUNK) {
        let refs: Vec<_> = chunk.iter().collect();
        out.extend(forward_online_batch(&refs, params, config)?);
    }
    Ok(out)
}

/// Metrics of a (preprocessed) dataset. AUROC is reported for binary tasks
/// whose labels contain both classes.
pub fn metrics_from_logits(
    labels: &[usize],
    logits: &[Vec<f64>],
    config: &ModelConfig,
) -> Result<Metrics, TrainError> {
    let accuracy = evaluate_accuracy(labels, logits)?;
    let auroc = if config.classifier.num_classes == 2 {
        let scores: Vec<f64> = logits.iter().map(|z| positive_score(z)).collect();
        evaluate_auroc(labels, &scores).ok()
    } else {
        None
    };
    let mut loss = 0.0;
    for (&y, z) in labels.iter().zip(logits) {
        loss += prediction_loss(y, z, config)?;
    }
    Ok(Metrics {
        accuracy,
        auroc,
        loss: loss / labels.len() as f64,
        online_accuracy: None,
        seconds: 0.0,
    })
}

pub fn evaluate(
    dataset: &Dataset,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Metrics, TrainError> {
    let start = std::time::Instant::now();
    let labels = dataset.labels();
    let logits = predict(dataset, params, config)?;
    let mut m = metrics_from_logits(&labels, &logits, config)?;
    if config.encoder.causal {
        m.online_accuracy = Some(evaluate_online(&labels, &predict_online(dataset, params, config)?)?);
    }
    m.seconds = start.elapsed().as_secs_f64();
    Ok(m)
}
