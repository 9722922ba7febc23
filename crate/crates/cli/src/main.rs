//! `interpcnn` command-line driver.
//!
//! Exit codes: 0 success, 1 failed checks, 2 usage, config or input
//! errors, 3 training divergence.

mod commands;
mod config;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Overrides;

#[derive(Parser)]
#[command(
    name = "interpcnn",
    version,
    about = "Train, evaluate and verify InterpConv point-cloud networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Seed for initialization, shuffling, augmentation and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Omit wall times from metrics so reruns are byte-identical.
    #[arg(long)]
    deterministic: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            threads: self.threads,
            deterministic: self.deterministic,
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes metrics.csv, best.icnn and effective.toml.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the data of its own or another config.
    Eval {
        checkpoint: PathBuf,
        /// Take the data section from this config instead of the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `test` or `train`.
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run the invariant checks.
    Verify {
        /// Only checks whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
        /// Print check names without running them.
        #[arg(long)]
        list: bool,
        /// Run against a deliberately broken kernel.
        #[arg(long, hide = true, value_parser = ["off-by-one", "untruncated"])]
        mutant: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Time classifier forward and backward passes.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict one cloud file with a checkpoint.
    Infer {
        checkpoint: PathBuf,
        cloud: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train { config, common } => commands::train(&config, &common.overrides()),
        Command::Eval {
            checkpoint,
            config,
            split,
            common,
        } => commands::eval(&checkpoint, config.as_deref(), &split, &common.overrides()),
        Command::Verify {
            filter,
            list,
            mutant,
            common,
        } => commands::verify(filter, list, mutant.as_deref(), &common.overrides()),
        Command::Bench { config, common } => {
            commands::bench(config.as_deref(), &common.overrides())
        }
        Command::Infer {
            checkpoint,
            cloud,
            common,
        } => commands::infer(&checkpoint, &cloud, &common.overrides()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
