//! Batch front end for the relational reasoning network: graph construction,
//! training, evaluation, gradient checking, and hyperparameter sweeps.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{resolve, UserError};

#[derive(Parser)]
#[command(name = "rrnet", version, about = "Cross-modality mapping by relational reasoning on graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file (key=value lines; may start with `preset=NAME`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: synthetic, filmtrust, esc10, esc50, cifar10, cifar100.
    #[arg(long)]
    preset: Option<String>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<config::RunConfig> {
        resolve(self.preset.as_deref(), self.config.as_deref(), self.seed, self.out.as_deref())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the graphs, train, and write metrics plus a checkpoint.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Score a trained checkpoint on the config's test split.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Verify analytic gradients against finite differences on a small
    /// synthetic bundle; nonzero exit above tolerance.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the cross product of `sweep.<key>=v1,v2,...` axes, one training
    /// run per cell.
    Sweep {
        #[command(flatten)]
        args: ConfigArgs,
        /// Parallel sweep cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Generate a synthetic dataset as feature/confidence/pair files.
    Synth {
        #[command(flatten)]
        args: ConfigArgs,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { args } => {
            run::cmd_train(&args.resolve()?)?;
            Ok(())
        }
        Command::Eval { args, checkpoint } => run::cmd_eval(&args.resolve()?, &checkpoint),
        Command::Gradcheck { tolerance, seed } => {
            if run::cmd_gradcheck(seed, tolerance)? {
                Ok(())
            } else {
                std::process::exit(1);
            }
        }
        Command::Sweep { args, jobs } => run::cmd_sweep(&args.resolve()?, jobs),
        Command::Synth { args } => run::cmd_synth(&args.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            // Input problems (bad config, missing files) exit 2; runtime
            // failures exit 1.
            if err.chain().any(|cause| cause.is::<UserError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
