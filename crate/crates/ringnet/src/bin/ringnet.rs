use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ringnet::config::ExperimentConfig;
use ringnet::experiment;
use ringnet::Error;

#[derive(Parser)]
#[command(name = "ringnet", version, about = "Multi-task CNN training and retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the model seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the dataset scale divisor.
    #[arg(long)]
    scale: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Build an experiment's dataset manifest.
    BuildData(RunArgs),
    /// Train, resuming from the experiment's checkpoint when one exists.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Worker threads for the independent per-task baseline.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Evaluate the trained checkpoint and write metrics JSON.
    Eval(RunArgs),
    /// Finite-difference gradient checks of the model stacks.
    Gradcheck,
    /// Summarize a run's metrics into CSVs and a terminal digest.
    Report(RunArgs),
}

/// 0 success, 2 bad config/usage, 3 missing or inconsistent data,
/// 4 numerical failure. Clap's own parse errors also exit 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArg(_) | Error::UnknownTask(_) => 2,
        Error::Data(_) | Error::EmptyDataset(_) | Error::Checkpoint(_) | Error::Io(_) => 3,
        Error::Numeric(_) | Error::ShapeMismatch { .. } => 4,
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
    }
    if let Some(scale) = args.scale {
        cfg.dataset.scale = scale;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.verb {
        Verb::BuildData(args) => {
            let cfg = load_config(&args)?;
            let path = experiment::cmd_build_data(&cfg)?;
            println!("wrote {}", path.display());
        }
        Verb::Train { run, threads } => {
            let cfg = load_config(&run)?;
            let outcome = experiment::cmd_train(&cfg, threads)?;
            let paths: Vec<String> =
                outcome.checkpoints.iter().map(|p| p.display().to_string()).collect();
            println!("trained {} visit epochs; saved {}", outcome.new_visits.len(), paths.join(", "));
        }
        Verb::Eval(args) => {
            let cfg = load_config(&args)?;
            let report = experiment::cmd_eval(&cfg)?;
            if let Some(e) = report.test_error {
                println!("test error {e:.4}");
            }
            if let (Some(m), Some(r)) = (report.mean_dcg25_reranker, report.mean_dcg25_random) {
                println!("mean DCG@25 {m:.5} reranked vs {r:.5} random");
            }
            println!("wrote {}", cfg.metrics_path().display());
        }
        Verb::Gradcheck => {
            let mut out = std::io::stdout().lock();
            if !experiment::cmd_gradcheck(&mut out)? {
                return Err(Error::Numeric("gradient check failed".into()));
            }
        }
        Verb::Report(args) => {
            let cfg = load_config(&args)?;
            let mut out = std::io::stdout().lock();
            experiment::cmd_report(&cfg, &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
