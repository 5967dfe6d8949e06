use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dcsf::asts::load_dataset;
use dcsf::datagen::{write_regular_table, RegularSeries};
use serde_json::Value;

fn dcsf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcsf"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = dcsf(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], dir: &Path) -> i32 {
    dcsf(args, dir).status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn regular_table(dir: &Path, d: usize, l: usize, rows: usize) -> String {
    let series: Vec<RegularSeries> = (0..rows)
        .map(|r| RegularSeries {
            values: (0..d).map(|c| (0..l).map(|t| (r * 100 + c * 10 + t) as f64).collect()).collect(),
            label: r % 2,
        })
        .collect();
    fs::write(dir.join("table.csv"), write_regular_table(&series)).unwrap();
    "table.csv".into()
}

#[test]
fn toy_generation_is_reproducible_and_names_its_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["generate", "toy", "--T", "20", "--n", "4000", "--sparsity", "0.5", "--seed", "7"];
    ok(&[&args[..], &["--out", "a.asts"]].concat(), d);
    ok(&[&args[..], &["--out", "b.asts"]].concat(), d);
    let a = fs::read(d.join("a.asts")).unwrap();
    assert_eq!(a, fs::read(d.join("b.asts")).unwrap());
    assert_eq!(load_dataset(d.join("a.asts")).unwrap().len(), 4000);
    let text = String::from_utf8(a).unwrap();
    let provenance = text.lines().nth(1).unwrap();
    assert!(provenance.starts_with('#') && provenance.contains("\"seed\":7"), "{provenance}");
    let manifest = json(&d.join("a.asts.manifest.json"));
    assert_eq!(manifest["params"]["seed"], 7);
    assert!(manifest["seconds"].is_f64());
}

#[test]
fn missing_generation_matches_the_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let table = regular_table(d, 5, 50, 6);
    ok(&["generate", "missing", "--input", &table, "--p", "0.1", "--seed", "2", "--out", "m.asts"], d);
    let ds = load_dataset(d.join("m.asts")).unwrap();
    assert!(ds.instances.iter().all(|i| i.num_observations() == 225));
}

#[test]
fn asynchronized_series_observe_one_channel_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let table = regular_table(d, 3, 30, 4);
    ok(&["generate", "asynchronize", "--input", &table, "--seed", "5", "--out", "a.asts"], d);
    for inst in load_dataset(d.join("a.asts")).unwrap().instances {
        let mut times: Vec<f64> = inst.channels.iter().flat_map(|c| c.times.clone()).collect();
        times.sort_by(f64::total_cmp);
        assert_eq!(times, (1..=30).map(f64::from).collect::<Vec<_>>());
    }
}

#[test]
fn train_then_evaluate_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "toy", "--n", "200", "--seed", "1", "--out", "toy.asts"], d);
    fs::write(d.join("run.toml"), "preset = \"toy\"\nmax_epochs = 3\nseed = 4\nlearning_rate = 0.5\n").unwrap();
    let train = |out: &str| {
        ok(
            &["train", "--data", "toy.asts", "--out", out, "--config", "run.toml", "--learning-rate", "0.001"],
            d,
        )
    };
    train("a");
    train("b");
    for f in ["checkpoint.json", "log.jsonl", "test.asts", "metrics.json"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let metrics = json(&d.join("a/metrics.json"));
    // the flag overrides the config file
    assert_eq!(metrics["run"]["train"]["learning_rate"], 0.001);
    assert_eq!(metrics["run"]["seed"], 4);
    assert_eq!(json(&d.join("a/manifest.json"))["epoch_seconds"].as_array().unwrap().len(), 3);
    assert_eq!(fs::read_to_string(d.join("a/log.jsonl")).unwrap().lines().count(), 4);

    ok(&["evaluate", "--checkpoint", "a/checkpoint.json", "--data", "a/test.asts", "--out", "eval.json"], d);
    let eval = json(&d.join("eval.json"));
    assert_eq!(eval["metrics"], metrics["metrics"]);
    assert_eq!(eval["run"]["seed"], 4);
    let acc = eval["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn exit_codes_separate_usage_data_and_numeric_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&["train", "--data", "absent.asts", "--out", "o"], d), 2);
    assert_eq!(code(&["frobnicate"], d), 2);
    assert_eq!(code(&["generate", "toy", "--T", "1", "--out", "x.asts"], d), 2);
    fs::write(d.join("bad.toml"), "typo = 3\n").unwrap();
    ok(&["generate", "toy", "--n", "60", "--out", "toy.asts"], d);
    assert_eq!(code(&["train", "--data", "toy.asts", "--out", "o", "--config", "bad.toml"], d), 2);
    fs::write(d.join("bad.asts"), "asts v1 D=2 L=2\n0; 1: 0.5=1, 0.1=2\n").unwrap();
    assert_eq!(code(&["train", "--data", "bad.asts", "--out", "o"], d), 3);
    let diverge = ["train", "--data", "toy.asts", "--out", "o", "--preset", "toy", "--learning-rate", "1e300"];
    assert_eq!(code(&diverge, d), 4);
}

#[test]
fn gradcheck_passes_for_seed_three() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck", "--seed", "3", "--out", "g.json"], dir.path());
    let lines: Vec<&str> = stdout.lines().skip(1).collect();
    assert!(lines.len() >= 13);
    assert!(lines.iter().all(|l| l.starts_with("PASS")), "{stdout}");
    let report = json(&dir.path().join("g.json"));
    for c in report["checks"].as_array().unwrap() {
        assert!(c["max_rel_err"].as_f64().unwrap() < 1e-4);
    }
}

#[test]
fn single_channel_ablation_reports_each_channel() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "toy", "--n", "120", "--out", "toy.asts"], d);
    let args = [
        "ablate", "--data", "toy.asts", "--variant", "single-channel", "--preset", "toy",
        "--max-epochs", "2", "--out", "r.json",
    ];
    ok(&args, d);
    let report = json(&d.join("r.json"));
    assert_eq!(report["variant"], "single-channel");
    assert_eq!(report["result"]["channels"].as_array().unwrap().len(), 2);
    assert!(report["baseline"]["accuracy"].is_f64());
}

#[test]
fn time_ablation_on_sparse_toy_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "toy", "--T", "20", "--n", "4000", "--sparsity", "0.9", "--seed", "11", "--out", "toy.asts"], d);
    let args = [
        "ablate", "--data", "toy.asts", "--variant", "no-time", "--preset", "toy", "--seed", "11", "--out", "r.json",
    ];
    ok(&args, d);
    let report = json(&d.join("r.json"));
    let default = report["baseline"]["accuracy"].as_f64().unwrap();
    let no_time = report["result"]["metrics"]["accuracy"].as_f64().unwrap();
    assert!(default >= 0.95, "default {default}");
    assert!(no_time <= 0.70, "no-time {no_time}");
}
