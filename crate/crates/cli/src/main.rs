//! `jmt`: generate synthetic data, train fusion models and run experiments.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jmt_core::fusion::ModelKind;

/// Exit code for malformed command lines, shared with `Error::Usage`.
const USAGE_EXIT: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "jmt",
    version,
    about = "Joint multimodal transformer fusion for affect prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that builds a run configuration.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Named starting configuration.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// TOML file layered over the preset; only the keys it sets change.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides both the run seed and the dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

/// Dataset source and model choice for training commands.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Dataset written by `generate-data`; generated from the config otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model variant, overriding the config.
    #[arg(long, value_parser = parse_model)]
    pub model: Option<ModelKind>,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic multimodal dataset and write it to `<out>/dataset.bin`.
    GenerateData {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train one model with early stopping on the validation fold.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Continue from a `last.ckpt` written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Train once per learning rate in the grid and keep the best on validation.
    GridSearch {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated learning rates, overriding the config grid.
        #[arg(long, value_delimiter = ',')]
        lr: Option<Vec<f64>>,
    },
    /// Subject-disjoint k-fold cross-validation.
    Kfold {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Number of folds; defaults to the dataset's fold count.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train every model variant under the same protocol for each seed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated seeds, overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Summarise metrics logs from one or more run directories.
    Report {
        /// Run directories or `metrics.jsonl` files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the summary to `<out>/report.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check run directories, checkpoints or dataset files for integrity.
    Verify {
        /// Run directories, `.ckpt` files or dataset files.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE_EXIT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
