mod common;

use approx::assert_abs_diff_eq;
use dcsf::asts::{normalize_times, AsTsInstance, Channel, IndicatorKind, IndicatorScheme};
use dcsf::datagen::{instance_rng, make_toy_dataset, ToyConfig};
use dcsf::diagnostics::{objective_suite, SuiteConfig};
use dcsf::model::{
    aggregate, channel_features, classify, encode_channel, forward, forward_batch, forward_online,
    forward_padded, global_steps, input_gradients, loss, loss_and_grads, Aggregation, Checkpoint,
    ModelConfig, ModelError, ModelParams, PaddedBatch, TimeEmbedding,
};
use dcsf::tensor::{AdamConfig, AdamState, Mask, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
struct Variant {
    include_time: bool,
    batch_norm: bool,
    independent: bool,
    causal: bool,
    mean: bool,
    binary_indicator: bool,
}

fn variant() -> impl Strategy<Value = Variant> {
    (any::<[bool; 6]>()).prop_map(|b| Variant {
        include_time: b[0],
        batch_norm: b[1],
        independent: b[2],
        causal: b[3],
        mean: b[4],
        binary_indicator: b[5],
    })
}

fn config_for(d: usize, classes: usize, v: Variant) -> ModelConfig {
    let mut c = common::small_config(d, classes);
    c.encoder = c.encoder.clone().with_include_time(v.include_time);
    c.encoder.use_batch_norm = v.batch_norm;
    c.encoder.independent_encoders = v.independent;
    c.encoder.causal = v.causal;
    if v.mean {
        c.encoder.aggregation = Aggregation::Mean;
    }
    if v.binary_indicator {
        c.scheme = IndicatorScheme::new(IndicatorKind::Binary, d);
    }
    c
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn channel_order_does_not_matter(seed in any::<u64>(), d in 1usize..6, classes in 2usize..4, v in variant()) {
        let mut r = rng(seed);
        let config = config_for(d, classes, v);
        let params = common::random_params(&config, &mut r);
        let inst = common::random_instance(&mut r, d, 12, 0);
        let base = forward(&inst, &params, &config).unwrap();
        for _ in 0..3 {
            let moved = common::shuffled(&mut r, &inst);
            let got = forward(&moved, &params, &config).unwrap();
            prop_assert!(common::max_abs_diff(&[base.clone()], &[got]) <= 1e-9);
        }
    }

    #[test]
    fn forward_is_encode_then_aggregate_then_classify(seed in any::<u64>(), d in 1usize..5, include_time in any::<bool>()) {
        let mut r = rng(seed);
        let mut config = common::small_config(d, 2);
        config.encoder = config.encoder.clone().with_include_time(include_time);
        let params = common::random_params(&config, &mut r);
        let canonical = common::random_instance(&mut r, d, 9, 1);
        let inst = common::shuffled(&mut r, &canonical);
        // embeddings summed in storage order, not canonical order
        let embeddings: Vec<Vec<f64>> = inst
            .channels
            .iter()
            .map(|c| {
                let x = channel_features(c, &config.scheme, &config.encoder.time_embedding).unwrap();
                let mask = Mask::full(1, c.len());
                encode_channel(&params.encoders[0], &config, &x, &mask).unwrap()
            })
            .collect();
        let z = aggregate(&embeddings).unwrap();
        let want = classify(&z, &params.classifier, &config).unwrap();
        let got = forward(&inst, &params, &config).unwrap();
        prop_assert!(common::max_abs_diff(&[want], &[got]) <= 1e-9);
    }

    #[test]
    fn extra_padding_changes_nothing(seed in any::<u64>(), d in 1usize..5, extra in 1usize..33, v in variant()) {
        let mut r = rng(seed);
        let config = config_for(d, 2, v);
        let params = common::random_params(&config, &mut r);
        let insts: Vec<AsTsInstance> = (0..3).map(|i| common::random_instance(&mut r, d, 10, i % 2)).collect();
        let refs: Vec<&AsTsInstance> = insts.iter().collect();
        let base = forward_padded(&PaddedBatch::new(&refs, &config).unwrap(), &params, &config).unwrap();
        let wide = PaddedBatch::with_extra_width(&refs, &config, extra).unwrap();
        let padded = forward_padded(&wide, &params, &config).unwrap();
        prop_assert!(common::max_abs_diff(&base, &padded) <= 1e-9);

        let grads = input_gradients(&wide, &params, &config).unwrap();
        for (sub, g) in wide.subs.iter().zip(&grads) {
            let (rows, width) = (sub.features.shape()[1], sub.width());
            for m in 0..sub.owners.len() {
                for row in 0..rows {
                    for t in sub.mask.valid(m)..width {
                        prop_assert_eq!(g.data()[(m * rows + row) * width + t], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn online_outputs_ignore_later_observations(seed in any::<u64>(), d in 1usize..4, delta in 0.5..3.0f64) {
        let mut r = rng(seed);
        let mut config = common::small_config(d, 2);
        config.encoder.causal = true;
        let params = common::random_params(&config, &mut r);
        let inst = common::random_instance(&mut r, d, 8, 0);
        let base = forward_online(&inst, &params, &config).unwrap();
        prop_assert_eq!(base.times.clone(), global_steps(&inst));
        prop_assert_eq!(base.logits.len(), base.times.len());
        let c = seed as usize % inst.channels.len();
        let pos = (seed >> 8) as usize % inst.channels[c].len();
        let mut moved = inst.clone();
        moved.channels[c].values[pos] += delta;
        let step = base.times.iter().position(|&t| t == inst.channels[c].times[pos]).unwrap();
        let after = forward_online(&moved, &params, &config).unwrap();
        for s in 0..step {
            prop_assert_eq!(&base.logits[s], &after.logits[s]);
        }
    }

    #[test]
    fn final_online_step_is_the_offline_prediction(seed in any::<u64>(), d in 1usize..4) {
        let mut r = rng(seed);
        let mut config = common::small_config(d, 3);
        config.encoder.causal = true;
        let params = common::random_params(&config, &mut r);
        let inst = common::random_instance(&mut r, d, 8, 2);
        let online = forward_online(&inst, &params, &config).unwrap();
        let offline = forward(&inst, &params, &config).unwrap();
        let last = online.logits.last().unwrap().clone();
        prop_assert!(common::max_abs_diff(&[last], &[offline]) <= 1e-12);
    }
}

#[test]
fn embedding_has_k_entries_for_any_length() {
    let config = common::small_config(3, 2);
    let params = common::random_params(&config, &mut rng(1));
    let mut r = rng(2);
    for len in [1, 5, 500] {
        let c = common::random_channel(&mut r, 2, len);
        let x = channel_features(&c, &config.scheme, &config.encoder.time_embedding).unwrap();
        let e = encode_channel(&params.encoders[0], &config, &x, &Mask::full(1, len)).unwrap();
        assert_eq!(e.len(), config.encoder.embedding_dim);
    }
}

#[test]
fn output_width_follows_classes() {
    let mut r = rng(3);
    for (classes, width) in [(2, 1), (3, 3), (5, 5)] {
        let config = common::small_config(2, classes);
        let params = common::random_params(&config, &mut r);
        let inst = common::random_instance(&mut r, 2, 6, 0);
        assert_eq!(forward(&inst, &params, &config).unwrap().len(), width);
    }
}

#[test]
fn no_time_input_has_indicator_and_value_rows() {
    let config = ModelConfig::new(4, 2);
    let mut no_time = config.clone();
    no_time.encoder = no_time.encoder.with_include_time(false);
    assert_eq!(config.input_rows(), 4 + 2);
    assert_eq!(no_time.input_rows(), 4 + 1);
    let c = Channel::new(2, vec![0.5, 0.7], vec![0.1, 0.9]);
    let x = channel_features(&c, &no_time.scheme, &no_time.encoder.time_embedding).unwrap();
    assert_eq!(x.shape(), &[5, 2]);
}

#[test]
fn zero_parameters_give_identical_embeddings() {
    let config = common::small_config(3, 2);
    let mut params = ModelParams::init(&config, &mut rng(4));
    params.set_flat(&vec![0.0; params.num_parameters()]);
    let mut r = rng(5);
    let mut embeddings = Vec::new();
    for id in 1..=3 {
        let c = common::random_channel(&mut r, id, 2 + id);
        let x = channel_features(&c, &config.scheme, &config.encoder.time_embedding).unwrap();
        embeddings.push(encode_channel(&params.encoders[0], &config, &x, &Mask::full(1, c.len())).unwrap());
    }
    assert!(embeddings.windows(2).all(|w| w[0] == w[1]));
    for _ in 0..5 {
        let inst = common::random_instance(&mut r, 3, 5, 0);
        assert_eq!(forward(&inst, &params, &config).unwrap(), vec![0.0]);
    }
}

#[test]
fn zero_convolutions_make_the_output_constant_in_the_inputs() {
    let mut config = common::small_config(2, 2);
    config.encoder.num_blocks = 3;
    config.encoder.filters_rest = config.encoder.filters_first;
    let mut params = common::random_params(&config, &mut rng(6));
    for block in &mut params.encoders[0].blocks {
        for conv in block.convs.iter_mut().chain(block.skip.as_mut()) {
            conv.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
    }
    assert!(params.encoders[0].blocks[1].skip.is_none());
    let mut r = rng(7);
    let shape = |r: &mut ChaCha8Rng| {
        let a = common::random_channel(r, 1, 4);
        let b = common::random_channel(r, 2, 6);
        AsTsInstance::new(vec![a, b], 0)
    };
    let first = forward(&shape(&mut r), &params, &config).unwrap();
    for _ in 0..10 {
        assert_eq!(forward(&shape(&mut r), &params, &config).unwrap(), first);
    }
}

#[test]
fn linear_classifier_without_hidden_layers() {
    let mut config = common::small_config(2, 3);
    config.classifier.num_dense_layers = 0;
    let params = common::random_params(&config, &mut rng(8));
    assert!(params.classifier.hidden.is_empty());
    let z = vec![0.3, -1.0, 2.0, 0.5, 0.0];
    let out = &params.classifier.output;
    let want: Vec<f64> = (0..3)
        .map(|o| out.bias.data()[o] + (0..5).map(|i| out.weight.data()[o * 5 + i] * z[i]).sum::<f64>())
        .collect();
    let got = classify(&z, &params.classifier, &config).unwrap();
    for (g, w) in got.iter().zip(&want) {
        assert_abs_diff_eq!(g, w, epsilon = 1e-12);
    }
}

#[test]
fn aggregation_examples() {
    assert_eq!(aggregate(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), vec![4.0, 6.0]);
    assert_eq!(aggregate(&[vec![1.5, -2.0]]).unwrap(), vec![1.5, -2.0]);
    assert!(matches!(aggregate(&[]), Err(ModelError::NoChannels { .. })));
}

#[test]
fn single_step_instance_has_one_online_output() {
    let mut config = common::small_config(2, 2);
    config.encoder.causal = true;
    let params = common::random_params(&config, &mut rng(9));
    let inst = AsTsInstance::new(
        vec![Channel::new(1, vec![0.2], vec![0.5]), Channel::new(2, vec![-1.0], vec![0.5])],
        1,
    );
    let out = forward_online(&inst, &params, &config).unwrap();
    assert_eq!(out.times, vec![0.5]);
    assert_eq!(out.logits.len(), 1);
    config.encoder.causal = false;
    assert!(matches!(forward_online(&inst, &params, &config), Err(ModelError::Usage(_))));
}

#[test]
fn zero_logit_loss_is_ln_two_and_batch_mean() {
    let config = common::small_config(2, 2);
    let mut params = common::random_params(&config, &mut rng(10));
    let inst = common::random_instance(&mut rng(11), 2, 6, 1);
    let single = loss(&[&inst], &params, &config).unwrap();
    let doubled = loss(&[&inst, &inst], &params, &config).unwrap();
    assert_abs_diff_eq!(single, doubled, epsilon = 1e-12);
    let out = &mut params.classifier.output;
    out.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
    out.bias.data_mut().iter_mut().for_each(|w| *w = 0.0);
    assert_abs_diff_eq!(loss(&[&inst], &params, &config).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
}

#[test]
fn inference_is_deterministic_and_zero_dropout_training_matches_it() {
    let mut config = common::small_config(3, 2);
    config.classifier.dropout = 0.0;
    let params = common::random_params(&config, &mut rng(12));
    let mut r = rng(13);
    let insts: Vec<AsTsInstance> = (0..4).map(|i| common::random_instance(&mut r, 3, 7, i % 2)).collect();
    let refs: Vec<&AsTsInstance> = insts.iter().collect();
    assert_eq!(forward_batch(&refs, &params, &config).unwrap(), forward_batch(&refs, &params, &config).unwrap());
    let eval = loss_and_grads(&refs, &params, &config, None).unwrap();
    let mut drop_rng = rng(14);
    let train = loss_and_grads(&refs, &params, &config, Some(&mut drop_rng)).unwrap();
    assert_eq!(eval.loss, train.loss);
    assert_eq!(eval.grads, train.grads);
    assert_eq!(eval.loss, loss(&refs, &params, &config).unwrap());
}

#[test]
fn dropout_changes_training_but_not_inference() {
    let mut config = common::small_config(2, 2);
    config.classifier.dropout = 0.5;
    config.classifier.num_dense_layers = 2;
    let params = common::random_params(&config, &mut rng(15));
    let inst = common::random_instance(&mut rng(16), 2, 6, 0);
    let refs = [&inst];
    let mut d1 = rng(17);
    let mut d2 = rng(18);
    let a = loss_and_grads(&refs, &params, &config, Some(&mut d1)).unwrap().loss;
    let b = loss_and_grads(&refs, &params, &config, Some(&mut d2)).unwrap().loss;
    assert_ne!(a, b);
    assert_eq!(loss(&refs, &params, &config).unwrap(), loss(&refs, &params, &config).unwrap());
}

#[test]
fn objective_gradients_match_finite_differences() {
    for seed in [3, 4, 5] {
        for check in objective_suite(seed, &SuiteConfig::default()).unwrap() {
            assert!(check.passed, "seed {seed}: {check:?}");
        }
    }
}

#[test]
fn adam_reduces_the_toy_loss() {
    let data = normalize_times(&make_toy_dataset(&ToyConfig::new(20, 20, 0.5, 3)).unwrap());
    let refs: Vec<&AsTsInstance> = data.instances.iter().collect();
    let config = common::small_config(2, 2);
    let mut params = ModelParams::init(&config, &mut instance_rng(3, 0));
    let mut adam = AdamState::for_params(
        AdamConfig::with_learning_rate(1e-2),
        params.named().into_iter().map(|(_, t)| t),
    );
    let start = loss(&refs, &params, &config).unwrap();
    for _ in 0..50 {
        let g = loss_and_grads(&refs, &params, &config, None).unwrap();
        let mut views: Vec<&mut [f64]> = params.tensors_mut().into_iter().map(Tensor::data_mut).collect();
        let grads: Vec<&[f64]> = g.grads.iter().map(Vec::as_slice).collect();
        adam.update(&mut views, &grads).unwrap();
    }
    let end = loss(&refs, &params, &config).unwrap();
    assert!(end < 0.5 * start, "loss {start} -> {end}");
}

#[test]
fn every_time_embedding_runs() {
    let mut r = rng(19);
    for te in [
        TimeEmbedding::AbsoluteTime,
        TimeEmbedding::TimeDelta,
        TimeEmbedding::sinusoidal(),
        TimeEmbedding::None,
    ] {
        let mut config = common::small_config(3, 2);
        config.encoder.time_embedding = te;
        let params = common::random_params(&config, &mut r);
        let inst = common::random_instance(&mut r, 3, 6, 0);
        let out = forward(&inst, &params, &config).unwrap();
        assert!(out.iter().all(|z| z.is_finite()));
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let config = common::small_config(2, 2);
    let params = common::random_params(&config, &mut rng(20));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let ckpt = Checkpoint::new(config, params);
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
}
