//! The `vdtrain` command line: synthesize, train-sft, train-copo, evaluate
//! and report over one run directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod layout;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "vdtrain", version, about = "Train and evaluate a patch-pair vulnerability detector")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed for every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Use the offline template teacher instead of the configured backend.
    #[arg(long, global = true)]
    pub mock_backend: bool,
    /// Run directory; defaults to the latest run with the same config hash.
    #[arg(long, global = true, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the augmented dataset with the teacher backend.
    Synthesize,
    /// Triplet supervised fine-tuning on the augmented dataset.
    TrainSft,
    /// Curriculum preference optimization from the SFT checkpoint.
    TrainCopo,
    /// Detection metrics for a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Summarize the reports of a run.
    Report,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Defaults to the COPO checkpoint, then the SFT checkpoint.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines corpus; defaults to `corpus.test`.
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Evaluate a uniform policy over the checkpoint (or dataset) vocabulary.
    #[arg(long)]
    pub untrained: bool,
    /// Report file suffix; defaults to the checkpoint name or `untrained`.
    #[arg(long)]
    pub name: Option<String>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let path = cli.config.as_deref().ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let cfg = RunConfig::load(path, cli.seed)?;
    let ctx = commands::Context::new(cfg, cli.run_dir.as_deref(), cli.mock_backend);
    match &cli.command {
        Command::Synthesize => commands::synthesize(&ctx),
        Command::TrainSft => commands::train_sft(&ctx),
        Command::TrainCopo => commands::train_copo(&ctx),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::Report => commands::report(&ctx),
    }
}
