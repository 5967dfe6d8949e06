use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asts::Dataset;
use crate::datagen::instance_rng;
use crate::model::ModelConfig;

use super::{evaluate, train, Metrics, TrainConfig, TrainError};

/// Hyperparameter grid sampled by [`random_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub residual_blocks: Vec<usize>,
    pub dense_layers: Vec<usize>,
    pub dense_widths: Vec<usize>,
    pub dropouts: Vec<f64>,
    /// Log-uniform bounds.
    pub learning_rate: (f64, f64),
    pub batch_sizes: Vec<usize>,
    pub num_trials: usize,
    /// Reruns of the best configuration on the test set.
    pub repeats: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            residual_blocks: vec![1, 2, 3, 4],
            dense_layers: (0..=5).collect(),
            dense_widths: vec![32, 64, 128, 256, 512],
            dropouts: vec![0.0, 0.1, 0.2, 0.3],
            learning_rate: (1e-5, 1e-3),
            batch_sizes: vec![32, 64, 128],
            num_trials: 10,
            repeats: 5,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), TrainError> {
        let (lo, hi) = self.learning_rate;
        if self.num_trials == 0 || self.repeats == 0 {
            return Err(TrainError::Config("num_trials and repeats must be at least 1".into()));
        }
        if self.residual_blocks.is_empty()
            || self.dense_layers.is_empty()
            || self.dense_widths.is_empty()
            || self.dropouts.is_empty()
            || self.batch_sizes.is_empty()
        {
            return Err(TrainError::Config("every search dimension needs a value".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(TrainError::Config(format!("bad learning rate range ({lo}, {hi})")));
        }
        Ok(())
    }

    /// Draws one configuration; unsampled fields come from the bases.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        base_model: &ModelConfig,
        base_train: &TrainConfig,
        rng: &mut R,
    ) -> (ModelConfig, TrainConfig) {
        let mut model = base_model.clone();
        let mut tc = base_train.clone();
        let pick = |v: &[usize], rng: &mut R| *v.choose(rng).expect("non-empty grid");
        model.encoder.num_blocks = pick(&self.residual_blocks, rng);
        model.classifier.num_dense_layers = pick(&self.dense_layers, rng);
        model.classifier.width = pick(&self.dense_widths, rng);
        model.classifier.dropout = *self.dropouts.choose(rng).expect("non-empty grid");
        let (lo, hi) = self.learning_rate;
        tc.learning_rate = if lo == hi {
            lo
        } else {
            (rng.gen_range(lo.ln()..hi.ln())).exp()
        };
        tc.batch_size = pick(&self.batch_sizes, rng);
        (model, tc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub val_metric: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub trials: Vec<Trial>,
    pub best: usize,
    /// Test metrics of each rerun of the best configuration.
    pub runs: Vec<Metrics>,
    pub accuracy: MeanStd,
    /// AUROC for binary tasks, accuracy otherwise.
    pub primary: MeanStd,
}

/// Samples `num_trials` configurations, keeps the one with the best
/// validation metric and retrains it `repeats` times with seeds
/// `seed, seed + 1, ...`, scoring each run on `test`.
pub fn random_search(
    space: &SearchSpace,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    seed: u64,
) -> Result<SearchOutcome, TrainError> {
    space.validate()?;
    let mut rng = instance_rng(seed, 0);
    let mut trials = Vec::with_capacity(space.num_trials);
    for t in 0..space.num_trials {
        let (model, mut tc) = space.sample(base_model, base_train, &mut rng);
        tc.seed = seed.wrapping_add(t as u64);
        let outcome = train(&model, train_set, val_set, &tc)?;
        log::info!("trial {t}: val {:.5} at epoch {}", outcome.best_metric, outcome.best_epoch);
        trials.push(Trial {
            model,
            train: tc,
            val_metric: outcome.best_metric,
            best_epoch: outcome.best_epoch,
        });
    }
    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.val_metric > trials[best].val_metric {
            best = i;
        }
    }
    let mut runs = Vec::with_capacity(space.repeats);
    for r in 0..space.repeats {
        let mut tc = trials[best].train.clone();
        tc.seed = seed.wrapping_add(r as u64);
        let outcome = train(&trials[best].model, train_set, val_set, &tc)?;
        runs.push(evaluate(test_set, &outcome.params, &trials[best].model)?);
    }
    let acc: Vec<f64> = runs.iter().map(|m| m.accuracy).collect();
    let primary: Vec<f64> = runs.iter().map(Metrics::primary).collect();
    Ok(SearchOutcome {
        trials,
        best,
        accuracy: MeanStd::of(&acc),
        primary: MeanStd::of(&primary),
        runs,
    })
}
