//! `dcsf`: generate datasets, train, evaluate, ablate, search and check
//! gradients.
//!
//! Exit status is 0 on success, 2 for usage errors (including missing
//! files), 3 for malformed or invalid data and 4 for numeric failures.

mod commands;
mod error;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "dcsf", version, about = "Deep convolutional set functions for asynchronous time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    #[command(subcommand)]
    Generate(GenerateCommand),
    /// Split a dataset, train, and write a checkpoint, log and test metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Compare the configured model with one ablated variant.
    Ablate(AblateArgs),
    /// Finite-difference check of every primitive and the full objective.
    Gradcheck(GradcheckArgs),
    /// Random hyperparameter search followed by repeated test runs.
    Search(SearchArgs),
}

#[derive(Debug, Subcommand)]
pub enum GenerateCommand {
    /// Two-channel coincident-spike task.
    Toy {
        /// Series length.
        #[arg(long = "T", default_value_t = 20)]
        t: usize,
        #[arg(long, default_value_t = 4000)]
        n: usize,
        /// Fraction of each channel's zero-valued steps removed.
        #[arg(long, default_value_t = 0.5)]
        sparsity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep one random channel per step of each regular series.
    Asynchronize {
        /// Regular-series table.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop `floor(p * D * L)` observations from each regular series.
    Missing {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file of settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationVariant {
    NoTime,
    TimeDelta,
    Sinusoidal,
    BatchNorm,
    IndependentEncoders,
    MeanAggregation,
    SingleChannel,
    Ensemble,
}

impl AblationVariant {
    pub fn name(self) -> String {
        self.to_possible_value().expect("no skipped variants").get_name().to_string()
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub variant: AblationVariant,
    /// Restrict `single-channel` to one channel.
    #[arg(long)]
    pub channel: Option<usize>,
    /// Report file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Report file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(cmd) => commands::generate(cmd),
        Command::Train(args) => commands::train(args),
        Command::Evaluate(args) => commands::evaluate_cmd(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
        Command::Search(args) => commands::search(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
