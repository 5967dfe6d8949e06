//! Training with class-balanced batches and validation early stopping,
//! evaluation metrics, hyperparameter search and ablation drivers.

mod ablation;
mod metrics;
mod search;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asts::{apply_time_range, Dataset, TimeRange, ValueStats};
use crate::datagen::instance_rng;
use crate::model::{
    apply_norm_updates, loss_and_grads, online_loss_and_grads, Checkpoint, ModelConfig,
    ModelError, ModelParams,
};
use crate::tensor::{AdamConfig, AdamState, TensorError};

pub use ablation::{
    ablation_ensemble, ablation_single_channel, ensemble_predict, fit_head, EnsembleMember,
    EnsembleReport, SingleChannelReport,
};
pub use metrics::{
    evaluate, evaluate_accuracy, evaluate_auroc, evaluate_online, metrics_from_logits,
    positive_score, predict, predict_class, predict_online, prediction_loss, Metrics, EVAL_CHUNK,
};
pub use search::{random_search, MeanStd, SearchOutcome, SearchSpace, Trial};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("class {class} has {count} instances, fewer than the {splits} splits")]
    Stratification {
        class: usize,
        count: usize,
        splits: usize,
    },
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss")]
    Divergence { epoch: usize, batch: usize },
    #[error("undefined metric: {0}")]
    Metric(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub balanced_batching: bool,
    pub normalize_values: bool,
    /// Train on every global step of a causal model.
    pub online: bool,
    /// Weight of the newest batch in running batch-norm statistics.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            balanced_batching: true,
            normalize_values: false,
            online: false,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return bad("patience and max_epochs must be at least 1".into());
        }
        if self.batch_size == 0 || (self.balanced_batching && self.batch_size < 2) {
            return bad(format!("batch size {} too small", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum {} outside [0, 1]", self.bn_momentum));
        }
        Ok(())
    }
}

/// Input scaling fitted on the training split.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Preprocessing {
    pub time_range: Option<TimeRange>,
    pub value_stats: Option<ValueStats>,
}

impl Preprocessing {
    pub fn fit(train: &Dataset, normalize_values: bool) -> Self {
        Self {
            time_range: train.observed_time_range(),
            value_stats: normalize_values.then(|| ValueStats::fit(train)),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self {
            time_range: ckpt.time_range,
            value_stats: ckpt.value_stats.clone(),
        }
    }

    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        let scaled = match self.time_range {
            Some(r) => apply_time_range(dataset, r),
            None => dataset.clone(),
        };
        match &self.value_stats {
            Some(s) => s.apply(&scaled),
            None => scaled,
        }
    }
}

/// Stratified, seeded split into train, validation and test sets.
pub fn split_dataset(
    dataset: &Dataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), TrainError> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(TrainError::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let splits = fractions.iter().filter(|f| **f > 0.0).count();
    let mut rng = instance_rng(seed, 0);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..dataset.num_classes {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.instances[i].label == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < splits {
            return Err(TrainError::Stratification {
                class,
                count: members.len(),
                splits,
            });
        }
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let cut1 = (fractions[0] * n).round() as usize;
        let cut2 = (((fractions[0] + fractions[1]) * n).round() as usize).max(cut1);
        parts[0].extend_from_slice(&members[..cut1]);
        parts[1].extend_from_slice(&members[cut1..cut2]);
        parts[2].extend_from_slice(&members[cut2..]);
    }
    for p in &mut parts {
        p.shuffle(&mut rng);
    }
    Ok((
        dataset.subset(&parts[0]),
        dataset.subset(&parts[1]),
        dataset.subset(&parts[2]),
    ))
}

/// Visits items in reshuffled rounds, so every item is drawn once before
/// any is repeated.
struct Cycler {
    items: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.pos == 0 {
            self.items.shuffle(rng);
        }
        let v = self.items[self.pos];
        self.pos = (self.pos + 1) % self.items.len();
        v
    }
}

/// One epoch of batches, each with `ceil(B/2)` instances of class 1 and
/// `floor(B/2)` of class 0. The smaller class is drawn repeatedly; the
/// epoch has `ceil(n / B)` batches.
pub fn balanced_batches<R: Rng + ?Sized>(
    labels: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if batch_size < 2 {
        return Err(TrainError::Config("balanced batches need a batch size of at least 2".into()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(TrainError::Config("balanced batches need binary labels".into()));
    }
    let class = |c: usize| (0..labels.len()).filter(|&i| labels[i] == c).collect::<Vec<_>>();
    let (pos, neg) = (class(1), class(0));
    if pos.is_empty() || neg.is_empty() {
        return Err(TrainError::Config("balanced batches need both classes".into()));
    }
    let mut pos = Cycler { items: pos, pos: 0 };
    let mut neg = Cycler { items: neg, pos: 0 };
    let n_pos = batch_size.div_ceil(2);
    let batches = labels.len().div_ceil(batch_size);
    Ok((0..batches)
        .map(|_| {
            let mut b: Vec<usize> = (0..n_pos).map(|_| pos.draw(rng)).collect();
            b.extend((n_pos..batch_size).map(|_| neg.draw(rng)));
            b
        })
        .collect())
}

/// One epoch of shuffled batches in which every class is spread evenly.
pub fn stratified_batches<R: Rng + ?Sized>(
    labels: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(labels.len());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(rng);
        let n = members.len() as f64;
        let offset: f64 = rng.gen();
        keyed.extend(members.iter().enumerate().map(|(k, &i)| ((k as f64 + offset) / n, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed
        .chunks(batch_size.max(1))
        .map(|c| c.iter().map(|&(_, i)| i).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    /// New best metric; snapshot the parameters.
    Improved,
    Continue,
    Stop,
}

/// Stops once `patience` epochs pass without a strictly better metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_metric: f64,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_epoch = epoch;
            StopDecision::Improved
        } else if epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Wall-clock seconds per epoch, kept apart from the deterministic log.
    pub epoch_seconds: Vec<f64>,
}

/// AUROC for binary tasks, accuracy otherwise; per-step accuracy when
/// training online.
pub fn validation_metric(
    dataset: &Dataset,
    params: &ModelParams,
    config: &ModelConfig,
    online: bool,
) -> Result<f64, TrainError> {
    let labels = dataset.labels();
    if online {
        return evaluate_online(&labels, &predict_online(dataset, params, config)?);
    }
    let logits = predict(dataset, params, config)?;
    if config.classifier.num_classes == 2 {
        let scores: Vec<f64> = logits.iter().map(|z| positive_score(z)).collect();
        evaluate_auroc(&labels, &scores)
    } else {
        evaluate_accuracy(&labels, &logits)
    }
}

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Fresh parameters for a training seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> ModelParams {
    ModelParams::init(config, &mut instance_rng(seed, INIT_STREAM))
}

/// Adam on the mean cross entropy, keeping the best validation snapshot
/// and stopping after `patience` epochs without improvement. Datasets are
/// used as given; see [`Preprocessing`].
pub fn train(
    model: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_from(init_params(model, config.seed), model, train_set, val_set, config)
}

pub fn train_from(
    mut params: ModelParams,
    model: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    model.validate().map_err(|m| TrainError::Model(ModelError::Config(m)))?;
    if config.online && !model.encoder.causal {
        return Err(TrainError::Config("online training needs a causal encoder".into()));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config("empty training or validation set".into()));
    }
    let labels = train_set.labels();
    let balanced = config.balanced_batching && model.classifier.num_classes == 2;
    if config.balanced_batching && !balanced {
        log::warn!("balanced batching needs a binary task; using stratified batches");
    }
    let mut batch_rng = instance_rng(config.seed, BATCH_STREAM);
    let mut dropout_rng = instance_rng(config.seed, DROPOUT_STREAM);
    let mut adam = AdamState::for_params(
        AdamConfig::with_learning_rate(config.learning_rate),
        params.named().into_iter().map(|(_, t)| t),
    );
    let mut best = params.clone();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut log = Vec::new();
    let mut epoch_seconds = Vec::new();
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let batches = if balanced {
            balanced_batches(&labels, config.batch_size, &mut batch_rng)?
        } else {
            stratified_batches(&labels, config.batch_size, &mut batch_rng)
        };
        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let refs: Vec<_> = batch.iter().map(|&i| &train_set.instances[i]).collect();
            let step = if config.online {
                online_loss_and_grads(&refs, &params, model, Some(&mut dropout_rng))
            } else {
                loss_and_grads(&refs, &params, model, Some(&mut dropout_rng))
            };
            let step = match step {
                Err(ModelError::Tensor(TensorError::NonFinite(_))) => {
                    return Err(TrainError::Divergence { epoch, batch: b })
                }
                other => other?,
            };
            loss_sum += step.loss;
            let grads: Vec<&[f64]> = step.grads.iter().map(Vec::as_slice).collect();
            let mut tensors = params.tensors_mut();
            let mut slices: Vec<&mut [f64]> = tensors.iter_mut().map(|t| t.data_mut()).collect();
            adam.update(&mut slices, &grads)?;
            apply_norm_updates(&mut params, &step.norm_updates, config.bn_momentum);
        }
        let val_metric = validation_metric(val_set, &params, model, config.online)?;
        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_metric,
        });
        epoch_seconds.push(start.elapsed().as_secs_f64());
        log::info!("epoch {epoch} loss {:.5} val {val_metric:.5}", loss_sum / batches.len() as f64);
        match stopper.observe(epoch, val_metric) {
            StopDecision::Improved => best.clone_from(&params),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok(TrainOutcome {
        params: best,
        log,
        best_epoch: stopper.best_epoch,
        best_metric: stopper.best_metric,
        epoch_seconds,
    })
}

/// A trained model with its preprocessing and held-out test metrics.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub preprocessing: Preprocessing,
    pub outcome: TrainOutcome,
    pub test: Metrics,
}

impl Experiment {
    pub fn checkpoint(&self, model: &ModelConfig) -> Checkpoint {
        let mut ckpt = Checkpoint::new(model.clone(), self.outcome.params.clone());
        ckpt.time_range = self.preprocessing.time_range;
        ckpt.value_stats = self.preprocessing.value_stats.clone();
        ckpt
    }
}

/// Fits preprocessing on the training split, trains, and scores the test
/// split.
pub fn run_experiment(
    model: &ModelConfig,
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
) -> Result<Experiment, TrainError> {
    let preprocessing = Preprocessing::fit(train_set, config.normalize_values);
    let outcome = train(
        model,
        &preprocessing.apply(train_set),
        &preprocessing.apply(val_set),
        config,
    )?;
    let test = evaluate(&preprocessing.apply(test_set), &outcome.params, model)?;
    Ok(Experiment {
        preprocessing,
        outcome,
        test,
    })
}

/// Settings that solve the two-channel toy task: standardised values and a
/// three-layer classifier of width 256 on a one-block encoder.
pub fn toy_preset(include_time: bool) -> (ModelConfig, TrainConfig) {
    let mut model = ModelConfig::new(2, 2);
    model.encoder = model.encoder.with_include_time(include_time);
    model.encoder.num_blocks = 1;
    model.classifier.num_dense_layers = 3;
    model.classifier.width = 256;
    let train = TrainConfig {
        max_epochs: 60,
        patience: 15,
        normalize_values: true,
        ..TrainConfig::default()
    };
    (model, train)
}
