use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::asts::{AsTsInstance, Dataset};
use crate::model::{penultimate_batch, DenseParams, ModelConfig, ModelError, ModelParams, MultiClassLoss};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor};

use super::{
    evaluate, evaluate_accuracy, evaluate_auroc, metrics_from_logits, positive_score, train, Metrics,
    TrainConfig, TrainError, EVAL_CHUNK,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleChannelReport {
    pub channel: usize,
    pub metrics: Metrics,
    /// Instances lacking the channel in the train, validation and test sets.
    pub skipped: [usize; 3],
}

/// Trains and tests on instances restricted to channel `d`.
pub fn ablation_single_channel(
    model: &ModelConfig,
    tc: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    d: usize,
) -> Result<SingleChannelReport, TrainError> {
    if d == 0 || d > train_set.num_channels {
        return Err(TrainError::Config(format!(
            "channel {d} outside 1..={}",
            train_set.num_channels
        )));
    }
    let (tr, s0) = train_set.restrict_to_channel(d);
    let (va, s1) = val_set.restrict_to_channel(d);
    let (te, s2) = test_set.restrict_to_channel(d);
    if s0 + s1 + s2 > 0 {
        log::warn!("channel {d}: skipped {s0}/{s1}/{s2} instances without it");
    }
    let outcome = train(model, &tr, &va, tc)?;
    Ok(SingleChannelReport {
        channel: d,
        metrics: evaluate(&te, &outcome.params, model)?,
        skipped: [s0, s1, s2],
    })
}

/// A model that only ever sees one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub channel: usize,
    pub params: ModelParams,
}

fn refs(ds: &Dataset) -> Vec<&AsTsInstance> {
    ds.instances.iter().collect()
}

/// Averages each instance's penultimate encodings over the members whose
/// channel it contains.
fn averaged_encodings(
    members: &[EnsembleMember],
    config: &ModelConfig,
    instances: &[&AsTsInstance],
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut sums: Vec<Option<Vec<f64>>> = vec![None; instances.len()];
    let mut counts = vec![0usize; instances.len()];
    for m in members {
        let present: Vec<(usize, AsTsInstance)> = instances
            .iter()
            .enumerate()
            .filter_map(|(i, inst)| {
                inst.channel(m.channel)
                    .map(|c| (i, AsTsInstance::new(vec![c.clone()], inst.label)))
            })
            .collect();
        for chunk in present.chunks(EVAL_CHUNK) {
            let refs: Vec<&AsTsInstance> = chunk.iter().map(|(_, x)| x).collect();
            let enc = penultimate_batch(&refs, &m.params, config)?;
            for ((i, _), e) in chunk.iter().zip(enc) {
                counts[*i] += 1;
                match &mut sums[*i] {
                    Some(s) => s.iter_mut().zip(&e).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(e),
                }
            }
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(i, (s, n))| {
            let s = s.ok_or(TrainError::Model(ModelError::NoChannels { instance: i }))?;
            Ok(s.into_iter().map(|v| v / n as f64).collect())
        })
        .collect()
}

fn apply_head(head: &DenseParams, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k_out = head.weight.shape()[0];
    let k_in = head.weight.shape()[1];
    let w = head.weight.data();
    features
        .iter()
        .map(|x| {
            (0..k_out)
                .map(|o| {
                    let row = &w[o * k_in..(o + 1) * k_in];
                    head.bias.data()[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Logits from averaged member encodings passed through `head`.
pub fn ensemble_predict(
    members: &[EnsembleMember],
    config: &ModelConfig,
    head: &DenseParams,
    instances: &[&AsTsInstance],
) -> Result<Vec<Vec<f64>>, TrainError> {
    let features = averaged_encodings(members, config, instances)?;
    Ok(apply_head(head, &features))
}

const HEAD_STEPS: usize = 300;
const HEAD_LEARNING_RATE: f64 = 1e-2;
const HEAD_CHECK_EVERY: usize = 10;

fn head_metric(labels: &[usize], logits: &[Vec<f64>], config: &ModelConfig) -> Result<f64, TrainError> {
    if config.classifier.num_classes == 2 {
        let scores: Vec<f64> = logits.iter().map(|z| positive_score(z)).collect();
        evaluate_auroc(labels, &scores)
    } else {
        evaluate_accuracy(labels, logits)
    }
}

/// Full-batch Adam on the output layer alone, starting from `init` and
/// keeping the snapshot with the best validation metric.
pub fn fit_head(
    init: &DenseParams,
    features: &[Vec<f64>],
    labels: &[usize],
    val_features: &[Vec<f64>],
    val_labels: &[usize],
    config: &ModelConfig,
) -> Result<DenseParams, TrainError> {
    let k_in = init.weight.shape()[1];
    if features.is_empty() || features.iter().any(|f| f.len() != k_in) {
        return Err(TrainError::Config("head features do not match the output layer".into()));
    }
    let x = Tensor::new(vec![features.len(), k_in], features.concat())?;
    let targets: Vec<f64> = labels.iter().map(|&y| if y == 1 { 1.0 } else { 0.0 }).collect();
    let mut head = init.clone();
    let mut adam = AdamState::for_params(
        AdamConfig::with_learning_rate(HEAD_LEARNING_RATE),
        [&head.weight, &head.bias],
    );
    let mut best = head.clone();
    let mut best_metric = head_metric(val_labels, &apply_head(&head, val_features), config)?;
    for step in 1..=HEAD_STEPS {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let w = tape.leaf(head.weight.clone().with_requires_grad(true));
        let b = tape.leaf(head.bias.clone().with_requires_grad(true));
        let z = tape.dense(xv, w, b)?;
        let j = if config.classifier.output_dim() == 1 {
            tape.binary_ce(z, &targets)?
        } else {
            match config.multiclass_loss {
                MultiClassLoss::Softmax => tape.softmax_ce(z, labels)?,
                MultiClassLoss::Sigmoid => tape.sigmoid_ce(z, labels)?,
            }
        };
        tape.backward(j)?;
        let gw = tape.grad(w).expect("weight gradient").to_vec();
        let gb = tape.grad(b).expect("bias gradient").to_vec();
        adam.update(&mut [head.weight.data_mut(), head.bias.data_mut()], &[&gw, &gb])?;
        if step % HEAD_CHECK_EVERY == 0 {
            let m = head_metric(val_labels, &apply_head(&head, val_features), config)?;
            if m > best_metric {
                best_metric = m;
                best = head.clone();
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub metrics: Metrics,
    /// Test metrics of each single-channel member on its own channel.
    pub member_metrics: Vec<Metrics>,
    pub members: Vec<EnsembleMember>,
    pub head: DenseParams,
}

/// One single-channel model per channel; test predictions come from the
/// averaged penultimate encodings through the first member's output layer,
/// refitted on averaged training encodings.
pub fn ablation_ensemble(
    model: &ModelConfig,
    tc: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
) -> Result<EnsembleReport, TrainError> {
    let start = Instant::now();
    let mut members = Vec::new();
    let mut member_metrics = Vec::new();
    for d in 1..=train_set.num_channels {
        let (tr, _) = train_set.restrict_to_channel(d);
        let (va, _) = val_set.restrict_to_channel(d);
        let (te, _) = test_set.restrict_to_channel(d);
        if tr.is_empty() || va.is_empty() {
            log::warn!("channel {d} never observed; no ensemble member");
            continue;
        }
        let outcome = train(model, &tr, &va, tc)?;
        if !te.is_empty() {
            member_metrics.push(evaluate(&te, &outcome.params, model)?);
        }
        members.push(EnsembleMember {
            channel: d,
            params: outcome.params,
        });
    }
    let Some(first) = members.first() else {
        return Err(TrainError::Config("no channel has training data".into()));
    };
    let train_features = averaged_encodings(&members, model, &refs(train_set))?;
    let val_features = averaged_encodings(&members, model, &refs(val_set))?;
    let head = fit_head(
        &first.params.classifier.output,
        &train_features,
        &train_set.labels(),
        &val_features,
        &val_set.labels(),
        model,
    )?;
    let logits = ensemble_predict(&members, model, &head, &refs(test_set))?;
    let mut metrics = metrics_from_logits(&test_set.labels(), &logits, model)?;
    metrics.seconds = start.elapsed().as_secs_f64();
    Ok(EnsembleReport {
        metrics,
        member_metrics,
        members,
        head,
    })
}
