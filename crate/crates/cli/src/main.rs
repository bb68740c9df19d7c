mod commands;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cssr::Error;

/// Open-set recognition with class-specific semantic reconstruction.
#[derive(Parser, Debug)]
#[command(name = "cssr", version, about)]
struct Cli {
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on the known classes and save a checkpoint with fitted score statistics.
    Train(Common),
    /// Evaluate a checkpoint on the test set and write a JSON report.
    Eval(Common),
    /// Write per-sample decisions for the test set as CSV.
    Infer(Common),
    /// Refit score statistics for a checkpoint on its training data.
    Stats(Common),
    /// Render the open-space map of a 2-D model as PGM images.
    Render2d(Common),
    /// Central-difference gradient checks of every primitive and the full loss.
    Gradcheck(Common),
    /// Empirical checks of the MSE counterexample and MAE monotonicity.
    Theorems(Common),
    /// Run several random known/unknown splits and summarize.
    Experiment(Common),
    /// Write a synthetic 28x28 glyph dataset as IDX files.
    Synth(Common),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON training configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, default_value = "image", value_parser = ["gaussian-2d", "image", "full"])]
    pub preset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory holding MNIST-named IDX files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output file (or directory for `synth`, file prefix for `render2d`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint to read.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = ["cssr", "rcssr", "linear", "gcpl", "rpl"])]
    pub mode: Option<String>,
    #[arg(long, value_parser = ["mae", "mse"])]
    pub error: Option<String>,
    #[arg(long, value_parser = ["sm-ap", "ap-sm"])]
    pub strategy: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Fusion weights of the three scores, e.g. 1,0,0.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Explicit known classes, e.g. 0,1,2,3,4,5.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["n_known", "trial"])]
    pub known_classes: Option<Vec<usize>>,
    /// Number of randomly drawn known classes.
    #[arg(long)]
    pub n_known: Option<usize>,
    /// Seed of the random known/unknown split.
    #[arg(long)]
    pub trial: Option<u64>,
    /// Number of splits for `experiment`.
    #[arg(long, default_value_t = 5)]
    pub trials: u64,
    /// Grid side for `render2d`.
    #[arg(long, default_value_t = 121)]
    pub resolution: usize,
    /// Half-width of the square `render2d` window.
    #[arg(long, default_value_t = 10.0)]
    pub bound: f64,
    /// Samples per class for `synth`: train,test.
    #[arg(long, value_delimiter = ',', default_values_t = [600, 100])]
    pub per_class: Vec<usize>,
}

/// Failure caused by bad invocation rather than bad data.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numerical() => 3,
        Some(Error::Io(_) | Error::Format { .. } | Error::Json(_) | Error::Mismatch { .. } | Error::Shape { .. }) => 2,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::Stats(a) => commands::stats(a),
        Command::Render2d(a) => commands::render2d(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Theorems(a) => commands::theorems(a),
        Command::Experiment(a) => commands::experiment(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
