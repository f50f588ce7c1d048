use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctxlab::harness::commands::{run_command, RunOptions};

#[derive(Parser)]
#[command(name = "ctxlab", version, about = "Continuous RoPE scaling and short-to-long preference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the numerical verification suites.
    Verify(Args),
    /// Train the tiny LM jointly with the frequency dynamics.
    TrainLm(Args),
    /// Perplexity of a checkpoint at several lengths.
    EvalExtrapolate(Args),
    /// Precompute scaled bases from a checkpoint.
    CacheBasis(Args),
    /// Generate a multi-turn preference dataset with a short-context model.
    GenPrefs(Args),
    /// Preference-optimize a checkpoint on a generated dataset.
    TrainLongpo(Args),
    /// Fit the dynamics to linear interpolation.
    PiFit(Args),
    /// Train and evaluate the copy-task extrapolation experiment.
    Extrapolation(Args),
    /// Short model, data generation and preference training end to end.
    LongpoToy(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Config file: JSON, or `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Only this verification suite.
    #[arg(long)]
    filter: Option<String>,
    /// Leave wall-clock fields out of the metrics.
    #[arg(long)]
    canonical_output: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("CTXLAB_THREADS") {
        if n.parse::<usize>().map_or(true, |n| n == 0) {
            eprintln!("error: CTXLAB_THREADS must be a positive integer, got '{n}'");
            return ExitCode::from(2);
        }
    }
    let (name, args) = match cli.command {
        Command::Verify(a) => ("verify", a),
        Command::TrainLm(a) => ("train-lm", a),
        Command::EvalExtrapolate(a) => ("eval-extrapolate", a),
        Command::CacheBasis(a) => ("cache-basis", a),
        Command::GenPrefs(a) => ("gen-prefs", a),
        Command::TrainLongpo(a) => ("train-longpo", a),
        Command::PiFit(a) => ("pi-fit", a),
        Command::Extrapolation(a) => ("extrapolation", a),
        Command::LongpoToy(a) => ("longpo-toy", a),
    };
    if args.filter.is_some() && name != "verify" {
        eprintln!("error: --filter only applies to verify");
        return ExitCode::from(2);
    }
    let opts = RunOptions {
        config: args.config,
        overrides: args.overrides,
        seed: args.seed,
        out: args.out,
        canonical: args.canonical_output,
        filter: args.filter,
    };
    match run_command(name, &opts) {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
