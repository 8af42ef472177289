//! Thin CLI over the library. Exit codes: 0 success, 2 config/usage error,
//! 3 numeric divergence, 4 oracle mismatch.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rtb_lab::config::ExperimentConfig;
use rtb_lab::harness;

#[derive(Parser)]
#[command(name = "rtb-lab", version, about = "Diffusion sampler laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a diffusion prior on the configured synthetic target.
    TrainPrior {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path; a loss CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a prior checkpoint into a posterior sampler.
    TrainPosterior {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample the configured task with a training-free guidance baseline.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        /// "dps" or "cla".
        #[arg(long)]
        algorithm: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw terminal samples from a prior or posterior checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metrics for a checkpoint against the analytic oracle.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional 2-d histogram dump of the sampled density.
        #[arg(long)]
        grid_out: Option<PathBuf>,
    },
    /// Consolidate metric CSVs from a directory of runs into one table.
    Compare {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> rtb_lab::Result<()> {
    match cli.command {
        Command::TrainPrior { config, seed, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            harness::cmd_train_prior(&cfg, seed, &out)
        }
        Command::TrainPosterior { config, prior, seed, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            harness::cmd_train_posterior(&cfg, &prior, seed, &out)
        }
        Command::Baseline { config, prior, algorithm, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            harness::cmd_baseline(&cfg, &prior, &algorithm, &out)
        }
        Command::Sample { checkpoint, n, seed, out } => {
            harness::cmd_sample(&checkpoint, n, seed, &out)
        }
        Command::Eval { config, checkpoint, out, grid_out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            harness::cmd_eval(&cfg, &checkpoint, &out, grid_out.as_deref())
        }
        Command::Compare { runs, out } => harness::cmd_compare(&runs, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
