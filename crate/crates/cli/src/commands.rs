use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dcsf::asts::{load_dataset, write_dataset, Dataset};
use dcsf::datagen::{asynchronize_all, induce_missing_all, make_toy_dataset, parse_regular_table, ToyConfig};
use dcsf::diagnostics::{gradient_suite, SuiteConfig};
use dcsf::model::{Aggregation, Checkpoint, ModelConfig, TimeEmbedding};
use dcsf::train::{
    ablation_ensemble, ablation_single_channel, evaluate, random_search, run_experiment, split_dataset,
    MeanStd, Metrics, Preprocessing, SearchSpace, TrainConfig, Trial,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{io, CliError};
use crate::{AblateArgs, AblationVariant, EvaluateArgs, GenerateCommand, GradcheckArgs, SearchArgs, TrainArgs};

/// Train, validation and test fractions of every split.
pub const SPLIT: [f64; 3] = [0.64, 0.16, 0.2];

/// Names the command, config and seed behind an output file.
#[derive(Debug, Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    data: String,
    seed: u64,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

/// Metrics without wall-clock time, so reruns write identical files.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricsRecord {
    accuracy: f64,
    auroc: Option<f64>,
    loss: f64,
    online_accuracy: Option<f64>,
}

impl From<&Metrics> for MetricsRecord {
    fn from(m: &Metrics) -> Self {
        Self {
            accuracy: m.accuracy,
            auroc: m.auroc,
            loss: m.loss,
            online_accuracy: m.online_accuracy,
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serialises");
    text.push('\n');
    write(path, &text)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

/// The dataset file with a provenance comment under the header.
fn write_annotated(path: &Path, ds: &Dataset, provenance: &str) -> Result<(), CliError> {
    let text = write_dataset(ds);
    let (header, body) = text.split_once('\n').unwrap_or((&text, ""));
    write(path, &format!("{header}\n# {provenance}\n{body}"))
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn summary(m: &Metrics) -> String {
    match m.auroc {
        Some(a) => format!("accuracy {:.4} auroc {:.4} loss {:.4}", m.accuracy, a, m.loss),
        None => format!("accuracy {:.4} loss {:.4}", m.accuracy, m.loss),
    }
}

pub fn generate(cmd: &GenerateCommand) -> Result<(), CliError> {
    let start = Instant::now();
    let (ds, params, out) = match cmd {
        GenerateCommand::Toy { t, n, sparsity, seed, out } => {
            let config = ToyConfig::new(*t, *n, *sparsity, *seed);
            config.validate()?;
            let params = json!({ "generator": "toy", "T": t, "n": n, "sparsity": sparsity, "seed": seed });
            (make_toy_dataset(&config)?, params, out)
        }
        GenerateCommand::Asynchronize { input, seed, out } => {
            let series = read_table(input)?;
            let params = json!({ "generator": "asynchronize", "input": input, "seed": seed });
            (asynchronize_all(&series, *seed), params, out)
        }
        GenerateCommand::Missing { input, p, seed, out } => {
            let series = read_table(input)?;
            let params = json!({ "generator": "missing", "input": input, "p": p, "seed": seed });
            (induce_missing_all(&series, *p, *seed)?, params, out)
        }
    };
    write_annotated(out, &ds, &format!("generate {params}"))?;
    let manifest = json!({
        "params": params,
        "output": out,
        "instances": ds.len(),
        "observations": ds.instances.iter().map(|i| i.num_observations()).sum::<usize>(),
        "seconds": start.elapsed().as_secs_f64(),
    });
    write_json(&manifest_path(out), &manifest)?;
    println!("wrote {} instances to {}", ds.len(), out.display());
    Ok(())
}

fn read_table(path: &Path) -> Result<Vec<dcsf::datagen::RegularSeries>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    Ok(parse_regular_table(&text)?)
}

/// Loads `data`, resolves the settings and splits with the run seed.
fn prepare(
    data: &Path,
    config: Option<&Path>,
    settings: &crate::settings::Settings,
) -> Result<(ModelConfig, TrainConfig, [Dataset; 3]), CliError> {
    let ds = load_dataset(data)?;
    let settings = settings.clone().resolve(config)?;
    let (model, tc) = settings.build(ds.num_channels, ds.num_classes)?;
    let (tr, va, te) = split_dataset(&ds, SPLIT, tc.seed)?;
    Ok((model, tc, [tr, va, te]))
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let (model, tc, [tr, va, te]) = prepare(&args.data, args.config.as_deref(), &args.settings)?;
    let run = RunInfo {
        command: "train",
        data: args.data.display().to_string(),
        seed: tc.seed,
        model: &model,
        train: &tc,
    };
    let exp = run_experiment(&model, &tc, &tr, &va, &te)?;
    create_dir(&args.out)?;

    let mut ckpt = serde_json::to_value(exp.checkpoint(&model)).expect("checkpoint serialises");
    ckpt["run"] = json!(run);
    write(&args.out.join("checkpoint.json"), &ckpt.to_string())?;

    let mut log = serde_json::to_string(&json!({ "run": run })).expect("serialises");
    log.push('\n');
    for record in &exp.outcome.log {
        log.push_str(&serde_json::to_string(record).expect("serialises"));
        log.push('\n');
    }
    write(&args.out.join("log.jsonl"), &log)?;

    let test_path = args.out.join("test.asts");
    write_annotated(&test_path, &te, &format!("held-out test split of {} seed={}", run.data, run.seed))?;
    let record = MetricsRecord::from(&exp.test);
    write_json(
        &args.out.join("metrics.json"),
        &json!({ "run": run, "split": "test", "best_epoch": exp.outcome.best_epoch, "metrics": record }),
    )?;
    write_json(
        &args.out.join("manifest.json"),
        &json!({
            "run": run,
            "files": ["checkpoint.json", "log.jsonl", "test.asts", "metrics.json"],
            "sizes": [tr.len(), va.len(), te.len()],
            "epoch_seconds": exp.outcome.epoch_seconds,
            "test_seconds": exp.test.seconds,
            "seconds": start.elapsed().as_secs_f64(),
        }),
    )?;
    println!(
        "best epoch {} of {}, test {}",
        exp.outcome.best_epoch,
        exp.outcome.log.len(),
        summary(&exp.test)
    );
    Ok(())
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.checkpoint).map_err(|e| io(&args.checkpoint, e))?;
    let ckpt = Checkpoint::from_json(&text)?;
    let run: Value = serde_json::from_str::<Value>(&text)
        .ok()
        .and_then(|mut v| v.get_mut("run").map(Value::take))
        .unwrap_or(Value::Null);
    let ds = load_dataset(&args.data)?;
    if ds.num_channels > ckpt.config.scheme.num_channels {
        return Err(CliError::data(format!(
            "dataset has {} channels, the model was trained on {}",
            ds.num_channels, ckpt.config.scheme.num_channels
        )));
    }
    let prepared = Preprocessing::from_checkpoint(&ckpt).apply(&ds);
    let metrics = evaluate(&prepared, &ckpt.params, &ckpt.config)?;
    let report = json!({
        "checkpoint": args.checkpoint,
        "data": args.data,
        "run": run,
        "metrics": MetricsRecord::from(&metrics),
    });
    match &args.out {
        Some(out) => write_json(out, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).expect("serialises")),
    }
    eprintln!("{}", summary(&metrics));
    Ok(())
}

fn variant_model(base: &ModelConfig, variant: AblationVariant) -> Option<ModelConfig> {
    let mut m = base.clone();
    let e = &mut m.encoder;
    match variant {
        AblationVariant::NoTime => e.time_embedding = TimeEmbedding::None,
        AblationVariant::TimeDelta => e.time_embedding = TimeEmbedding::TimeDelta,
        AblationVariant::Sinusoidal => e.time_embedding = TimeEmbedding::sinusoidal(),
        AblationVariant::BatchNorm => e.use_batch_norm = true,
        AblationVariant::IndependentEncoders => e.independent_encoders = true,
        AblationVariant::MeanAggregation => e.aggregation = Aggregation::Mean,
        AblationVariant::SingleChannel | AblationVariant::Ensemble => return None,
    }
    Some(m)
}

pub fn ablate(args: &AblateArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let (model, tc, [tr, va, te]) = prepare(&args.data, args.config.as_deref(), &args.settings)?;
    let run = RunInfo {
        command: "ablate",
        data: args.data.display().to_string(),
        seed: tc.seed,
        model: &model,
        train: &tc,
    };
    let name = args.variant.name();
    let baseline = run_experiment(&model, &tc, &tr, &va, &te)?.test;
    println!("default: {}", summary(&baseline));

    let result = if let Some(m) = variant_model(&model, args.variant) {
        let test = run_experiment(&m, &tc, &tr, &va, &te)?.test;
        println!("{name}: {}", summary(&test));
        json!({ "model": m, "metrics": MetricsRecord::from(&test) })
    } else {
        let prep = Preprocessing::fit(&tr, tc.normalize_values);
        let (tr, va, te) = (prep.apply(&tr), prep.apply(&va), prep.apply(&te));
        if args.variant == AblationVariant::Ensemble {
            let report = ablation_ensemble(&model, &tc, &tr, &va, &te)?;
            println!("{name}: {}", summary(&report.metrics));
            let members: Vec<Value> = report
                .members
                .iter()
                .zip(&report.member_metrics)
                .map(|(m, x)| json!({ "channel": m.channel, "metrics": MetricsRecord::from(x) }))
                .collect();
            json!({ "metrics": MetricsRecord::from(&report.metrics), "members": members })
        } else {
            let channels: Vec<usize> = match args.channel {
                Some(d) => vec![d],
                None => (1..=tr.num_channels).collect(),
            };
            let mut per_channel = Vec::new();
            for d in channels {
                let report = ablation_single_channel(&model, &tc, &tr, &va, &te, d)?;
                println!("{name} {d}: {}", summary(&report.metrics));
                per_channel.push(json!({
                    "channel": d,
                    "skipped": report.skipped,
                    "metrics": MetricsRecord::from(&report.metrics),
                }));
            }
            json!({ "channels": per_channel })
        }
    };
    let report = json!({
        "run": run,
        "variant": name,
        "baseline": MetricsRecord::from(&baseline),
        "result": result,
    });
    if let Some(out) = &args.out {
        write_json(out, &report)?;
        write_json(
            &manifest_path(out),
            &json!({ "run": run, "seconds": start.elapsed().as_secs_f64() }),
        )?;
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let mut cfg = SuiteConfig::default();
    if let Some(step) = args.step {
        cfg.step = step;
    }
    let checks = gradient_suite(args.seed, &cfg)?;
    println!("seed {} step {:e} rel_tol {:e}", args.seed, cfg.step, cfg.rel_tol);
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<20} max_rel_err {:.3e} checked {} skipped {}",
            c.name, c.max_rel_err, c.checked, c.skipped
        );
    }
    if let Some(out) = &args.out {
        write_json(out, &json!({ "seed": args.seed, "config": {
            "step": cfg.step, "rel_tol": cfg.rel_tol, "abs_floor": cfg.abs_floor,
        }, "checks": checks }))?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

#[derive(Serialize)]
struct SearchReport<'a> {
    run: RunInfo<'a>,
    space: &'a SearchSpace,
    trials: &'a [Trial],
    best: usize,
    runs: Vec<MetricsRecord>,
    accuracy: MeanStd,
    primary: MeanStd,
}

pub fn search(args: &SearchArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let (model, tc, [tr, va, te]) = prepare(&args.data, args.config.as_deref(), &args.settings)?;
    let space = SearchSpace {
        num_trials: args.trials,
        repeats: args.repeats,
        ..SearchSpace::default()
    };
    let prep = Preprocessing::fit(&tr, tc.normalize_values);
    let outcome = random_search(
        &space,
        &model,
        &tc,
        &prep.apply(&tr),
        &prep.apply(&va),
        &prep.apply(&te),
        tc.seed,
    )?;
    let report = SearchReport {
        run: RunInfo {
            command: "search",
            data: args.data.display().to_string(),
            seed: tc.seed,
            model: &model,
            train: &tc,
        },
        space: &space,
        trials: &outcome.trials,
        best: outcome.best,
        runs: outcome.runs.iter().map(MetricsRecord::from).collect(),
        accuracy: outcome.accuracy,
        primary: outcome.primary,
    };
    write_json(&args.out, &report)?;
    write_json(
        &manifest_path(&args.out),
        &json!({ "run": report.run, "seconds": start.elapsed().as_secs_f64() }),
    )?;
    println!(
        "best trial {} (val {:.4}); test accuracy {:.4} ± {:.4} over {} runs",
        outcome.best,
        outcome.trials[outcome.best].val_metric,
        outcome.accuracy.mean,
        outcome.accuracy.std,
        outcome.accuracy.n
    );
    Ok(())
}
