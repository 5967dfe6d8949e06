//! Oracles and random inputs shared by the integration and acceptance tests.
#![allow(dead_code)]

use dcsf::asts::{AsTsInstance, Channel};
use dcsf::model::{ModelConfig, ModelParams};
use dcsf::tensor::Padding;
use rand::seq::SliceRandom;
use rand::Rng;

/// Cross-correlation by the defining triple loop. `input` is `(N, C_in, L)`,
/// `weight` is `(C_out, C_in, k)`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    input: &[f64],
    n: usize,
    c_in: usize,
    len: usize,
    weight: &[f64],
    c_out: usize,
    k: usize,
    bias: &[f64],
    padding: Padding,
) -> Vec<f64> {
    let left = match padding {
        Padding::Same => k / 2,
        Padding::Causal => k - 1,
    } as isize;
    let mut out = vec![0.0; n * c_out * len];
    for b in 0..n {
        for o in 0..c_out {
            for t in 0..len {
                let mut acc = bias[o];
                for i in 0..c_in {
                    for j in 0..k {
                        let src = t as isize + j as isize - left;
                        if src >= 0 && (src as usize) < len {
                            acc += weight[(o * c_in + i) * k + j] * input[(b * c_in + i) * len + src as usize];
                        }
                    }
                }
                out[(b * c_out + o) * len + t] = acc;
            }
        }
    }
    out
}

/// AUROC over every positive-negative pair, ties counting one half.
pub fn pairwise_auroc(labels: &[usize], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn random_channel<R: Rng>(rng: &mut R, id: usize, len: usize) -> Channel {
    let mut times: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
    times.sort_by(f64::total_cmp);
    let values = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Channel::new(id, values, times)
}

/// A non-empty random subset of channels `1..=d`, each with 1 to `max_len`
/// observations.
pub fn random_instance<R: Rng>(rng: &mut R, d: usize, max_len: usize, label: usize) -> AsTsInstance {
    let mut ids: Vec<usize> = (1..=d).collect();
    ids.shuffle(rng);
    let keep = rng.gen_range(1..=d);
    let channels = ids[..keep]
        .iter()
        .map(|&id| {
            let len = rng.gen_range(1..=max_len);
            random_channel(rng, id, len)
        })
        .collect();
    AsTsInstance::new(channels, label)
}

/// The same channel set stored in a shuffled order.
pub fn shuffled<R: Rng>(rng: &mut R, instance: &AsTsInstance) -> AsTsInstance {
    let mut channels = instance.channels.clone();
    channels.shuffle(rng);
    AsTsInstance {
        channels,
        label: instance.label,
    }
}

/// A narrow model that keeps property tests fast.
pub fn small_config(d: usize, classes: usize) -> ModelConfig {
    let mut config = ModelConfig::new(d, classes);
    config.encoder.filters_first = 6;
    config.encoder.filters_rest = 8;
    config.encoder.embedding_dim = 5;
    config.encoder.num_blocks = 2;
    config.classifier.width = 7;
    config
}

/// Initialised parameters with every entry jittered, so biases are non-zero.
pub fn random_params<R: Rng>(config: &ModelConfig, rng: &mut R) -> ModelParams {
    let mut params = ModelParams::init(config, rng);
    let flat: Vec<f64> = params
        .flatten()
        .into_iter()
        .map(|w| w + rng.gen_range(-0.2..0.2))
        .collect();
    params.set_flat(&flat);
    params
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}
