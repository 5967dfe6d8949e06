use std::collections::BTreeSet;

use dcsf::asts::AsTsInstance;
use dcsf::datagen::{
    asynchronize, asynchronize_all, induce_missing, induce_missing_all, instance_rng,
    make_toy_dataset, make_toy_instance, parse_regular_table, write_regular_table, DatagenError,
    RegularSeries, ToyConfig,
};
use proptest::prelude::*;

fn spike_time(inst: &AsTsInstance, id: usize) -> Option<f64> {
    let c = inst.channel(id)?;
    c.values.iter().position(|&v| v == 1.0).map(|i| c.times[i])
}

fn series_strategy() -> impl Strategy<Value = RegularSeries> {
    (1usize..6, 1usize..40, 0usize..3).prop_flat_map(|(d, l, label)| {
        prop::collection::vec(prop::collection::vec(-10.0..10.0f64, l), d)
            .prop_map(move |values| RegularSeries { values, label })
    })
}

/// All `(channel, time, value)` triples of an instance.
fn triples(inst: &AsTsInstance) -> Vec<(usize, u64, u64)> {
    inst.channels
        .iter()
        .flat_map(|c| {
            c.times
                .iter()
                .zip(&c.values)
                .map(move |(t, v)| (c.id, t.to_bits(), v.to_bits()))
        })
        .collect()
}

proptest! {
    #[test]
    fn toy_instances_keep_their_spikes(t in 2usize..40, p in 0.0..0.95f64, positive in any::<bool>(), seed in any::<u64>()) {
        let config = ToyConfig::new(t, 2, p, seed);
        prop_assume!(config.validate().is_ok());
        let inst = make_toy_instance(positive, &config, &mut instance_rng(seed, 0)).unwrap();
        prop_assert_eq!(inst.label, usize::from(positive));
        let kept = t - (p * t as f64).floor() as usize;
        for c in &inst.channels {
            prop_assert_eq!(c.len(), kept);
            prop_assert_eq!(c.values.iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert!(c.values.iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert!(c.times.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(c.times.iter().all(|&x| x >= 0.0 && x < t as f64 && x.fract() == 0.0));
        }
        let (a, b) = (spike_time(&inst, 1).unwrap(), spike_time(&inst, 2).unwrap());
        prop_assert_eq!(a == b, positive);
    }

    #[test]
    fn asynchronize_partitions_the_steps(s in series_strategy(), seed in any::<u64>()) {
        let inst = asynchronize(&s, &mut instance_rng(seed, 0));
        let mut times: Vec<f64> = inst.channels.iter().flat_map(|c| c.times.clone()).collect();
        times.sort_by(f64::total_cmp);
        let expected: Vec<f64> = (1..=s.len()).map(|t| t as f64).collect();
        prop_assert_eq!(times, expected);
        for c in &inst.channels {
            for (t, v) in c.times.iter().zip(&c.values) {
                prop_assert_eq!(*v, s.values[c.id - 1][*t as usize - 1]);
            }
        }
    }

    #[test]
    fn induce_missing_removes_exactly_the_floor(s in series_strategy(), p in 0.0..0.99f64, seed in any::<u64>()) {
        let inst = induce_missing(&s, p, &mut instance_rng(seed, 0)).unwrap();
        let total = s.num_channels() * s.len();
        prop_assert_eq!(inst.num_observations(), total - (p * total as f64).floor() as usize);
        let full: BTreeSet<_> = triples(&s.to_instance()).into_iter().collect();
        prop_assert!(triples(&inst).iter().all(|x| full.contains(x)));
        prop_assert!(inst.channels.iter().all(|c| !c.is_empty()));
    }

    #[test]
    fn regular_tables_round_trip(series in prop::collection::vec(series_strategy(), 1..4)) {
        // one table holds a single shape
        let (d, l) = (series[0].num_channels(), series[0].len());
        let series: Vec<RegularSeries> = series
            .into_iter()
            .filter(|s| s.num_channels() == d && s.len() == l)
            .collect();
        let back = parse_regular_table(&write_regular_table(&series)).unwrap();
        prop_assert_eq!(back, series);
    }
}

#[test]
fn mean_toy_observation_count() {
    for p in [0.1, 0.5, 0.9] {
        let ds = make_toy_dataset(&ToyConfig::new(20, 400, p, 5)).unwrap();
        let mean = ds
            .instances
            .iter()
            .flat_map(|i| &i.channels)
            .map(|c| c.len() as f64)
            .sum::<f64>()
            / (2 * ds.len()) as f64;
        assert!((mean - (1.0 - p) * 20.0).abs() <= 1.0, "p {p}: mean {mean}");
    }
}

#[test]
fn toy_dataset_is_pure_in_its_seed() {
    let a = make_toy_dataset(&ToyConfig::new(20, 50, 0.5, 7)).unwrap();
    let b = make_toy_dataset(&ToyConfig::new(20, 50, 0.5, 7)).unwrap();
    let c = make_toy_dataset(&ToyConfig::new(20, 50, 0.5, 8)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 50);
    assert_eq!(a.labels().iter().filter(|&&y| y == 1).count(), 25);
}

#[test]
fn asynchronize_channel_counts_are_binomial() {
    // each step picks channel 1 with probability 1/2
    let series = vec![RegularSeries { values: vec![vec![0.0; 1000]; 2], label: 0 }; 20];
    let ds = asynchronize_all(&series, 3);
    let sigma = (1000.0f64 * 0.25).sqrt();
    for inst in &ds.instances {
        let n1 = inst.channel(1).map_or(0, |c| c.len()) as f64;
        assert!((n1 - 500.0).abs() <= 3.0 * sigma, "{n1}");
    }
}

#[test]
fn worked_missing_example() {
    let series = vec![RegularSeries { values: vec![vec![1.0; 50]; 5], label: 1 }; 10];
    let ds = induce_missing_all(&series, 0.1, 11).unwrap();
    assert!(ds.instances.iter().all(|i| i.num_observations() == 225));
    assert_eq!((ds.num_channels, ds.num_classes), (5, 2));
}

#[test]
fn invalid_parameters_are_rejected() {
    assert!(matches!(ToyConfig::new(1, 10, 0.0, 0).validate(), Err(DatagenError::Config(_))));
    assert!(matches!(ToyConfig::new(20, 10, 1.0, 0).validate(), Err(DatagenError::Config(_))));
    let s = RegularSeries { values: vec![vec![0.0; 4]], label: 0 };
    assert!(induce_missing(&s, 1.0, &mut instance_rng(0, 0)).is_err());
}
