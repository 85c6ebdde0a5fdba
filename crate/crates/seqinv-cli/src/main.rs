//! Command-line driver: dataset generation and ingestion, training, grid
//! search, characteristic estimation, corruption/masking injectors,
//! forward-model training and evaluation, report verification, and named
//! end-to-end experiment presets.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 numeric failure.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "seqinv", version, about = "Inverse estimation of static entity characteristics from driver-response series")]
struct Cli {
    /// Flat key=value configuration file merged into the command's settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override for data generation / sampling in the invoked command.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for run artifacts.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,

    /// Worker threads for parallel sections (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth attributes.
    Synth(commands::SynthArgs),
    /// Validate a forcing/attributes dataset and print a summary.
    Ingest(commands::IngestArgs),
    /// Train an ensemble of inverse models.
    Train(commands::TrainArgs),
    /// Hyperparameter grid search with a train/validation split.
    Grid(commands::GridArgs),
    /// Reconstruct characteristics with uncertainty from checkpoints.
    Estimate(commands::EstimateArgs),
    /// Add Gaussian noise to an attributes table.
    Corrupt(commands::CorruptArgs),
    /// Mark a fraction of entities' attributes as missing.
    Mask(commands::MaskArgs),
    /// Train the characteristic-conditioned forward model.
    ForwardTrain(commands::ForwardTrainArgs),
    /// Evaluate a forward model (NSE per entity).
    ForwardEval(commands::ForwardEvalArgs),
    /// Recompute a run's metrics from raw artifacts and verify the report.
    Report(commands::ReportArgs),
    /// Run a named experiment preset end to end.
    Run(commands::PresetArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let globals = commands::Globals {
        config: cli.config,
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    let result = match cli.command {
        Command::Synth(args) => commands::synth(&globals, args),
        Command::Ingest(args) => commands::ingest(&globals, args),
        Command::Train(args) => commands::train(&globals, args),
        Command::Grid(args) => commands::grid(&globals, args),
        Command::Estimate(args) => commands::estimate(&globals, args),
        Command::Corrupt(args) => commands::corrupt(&globals, args),
        Command::Mask(args) => commands::mask(&globals, args),
        Command::ForwardTrain(args) => commands::forward_train(&globals, args),
        Command::ForwardEval(args) => commands::forward_eval(&globals, args),
        Command::Report(args) => commands::report(&globals, args),
        Command::Run(args) => commands::run_preset(&globals, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
