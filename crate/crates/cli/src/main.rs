use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hytrec::error::ErrorClass;
use hytrec_cli::{run, Command, RunConfig};

/// Hybrid attention next-item recommender: data preparation, training,
/// evaluation, sweeps, gradient checks and benchmarks.
#[derive(Parser)]
#[command(name = "hytrec", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (relative paths hang off $HYTREC_OUT_ROOT).
    #[arg(long, global = true)]
    out: Option<String>,

    /// Sets every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dotted KEY=VALUE applied on top of the config file, e.g.
    /// `model.d_model=32`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Parse (or generate), filter and split a dataset.
    Prepare,
    /// Train on a prepared dataset.
    Train,
    /// Score a checkpoint on the test split.
    Eval,
    /// Train and evaluate one model per ratio, head count or variant.
    Sweep,
    /// Finite-difference check of every parameter gradient.
    Gradcheck,
    /// Forward throughput across sequence lengths.
    Bench,
    /// Branch ablation over several seeds on synthetic data.
    Ablate,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_CHECK_FAILED: u8 = 5;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Prepare => Command::Prepare,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Sweep => Command::Sweep,
        Cmd::Gradcheck => Command::Gradcheck,
        Cmd::Bench => Command::Bench,
        Cmd::Ablate => Command::Ablate,
    };
    let result = RunConfig::load(cli.config.as_deref(), &cli.overrides).and_then(|mut cfg| {
        if let Some(s) = cli.seed {
            cfg.set_seed(s);
        }
        if let Some(o) = cli.out {
            cfg.out_dir = o;
        }
        run(command, &cfg)
    });
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            println!("{}: outputs in {}", command.name(), outcome.out_dir.display());
            if outcome.failed {
                ExitCode::from(EXIT_CHECK_FAILED)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("hytrec {}: {e}", command.name());
            ExitCode::from(match e.class() {
                ErrorClass::Config => EXIT_CONFIG,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numeric => EXIT_NUMERIC,
            })
        }
    }
}
