//! `slamprune` — end-to-end driver for the pruning × adapter experiments:
//! synthetic corpus generation, LM pretraining, per-cell training and
//! evaluation, the full sweep grid, analysis reports, and parameter
//! accounting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration schema
//! violation, 3 missing upstream artifact (checkpoint/corpus/report).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration: exit 2, message names the offending field.
    Config(String),
    /// Required upstream artifact absent or empty: exit 3.
    MissingArtifact(String),
    /// Anything else: exit 1.
    Other(String),
}

impl CliError {
    pub fn other(e: impl ToString) -> Self {
        CliError::Other(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 3,
        }
    }

    fn category(&self) -> &'static str {
        match self {
            CliError::Other(_) => "runtime",
            CliError::Config(_) => "config",
            CliError::MissingArtifact(_) => "missing-artifact",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Other(m) | CliError::Config(m) | CliError::MissingArtifact(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(name = "slamprune", version, about = "Encoder-pruning ASR experiment pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora onto disk.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite an existing data directory.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the character LM on all configured languages' text.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the single cell named in the config's [train] section.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Decode + score the configured cell, or score --hyp against --ref.
    Eval {
        #[arg(long, required_unless_present = "hyp")]
        config: Option<PathBuf>,
        /// Reference transcripts, `id<TAB>text`.
        #[arg(long, requires = "hyp")]
        r#ref: Option<PathBuf>,
        /// Hypothesis transcripts, `id<TAB>text`.
        #[arg(long, requires = "ref")]
        hyp: Option<PathBuf>,
        /// Optional report CSV path (file mode).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pruning × adapter grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Parallel worker threads; results are identical for any value.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Produce the analysis tables from a completed sweep.
    Analyze {
        #[arg(long)]
        config: PathBuf,
    },
    /// Emit parameter-accounting tables for the published encoder shapes.
    Params {
        /// Output directory for the CSV files.
        #[arg(long, default_value = "params")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_gen_data(&cfg, &config, force)
        }
        Command::Pretrain { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_pretrain(&cfg, &config)
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_train(&cfg, &config)
        }
        Command::Eval {
            config,
            r#ref,
            hyp,
            out,
        } => match (r#ref, hyp) {
            (Some(r), Some(h)) => commands::cmd_eval_files(&r, &h, out.as_deref()),
            _ => {
                let path = config.expect("clap enforces config in cell mode");
                let cfg = ExperimentConfig::load(&path)?;
                commands::cmd_eval_cell(&cfg, &path)
            }
        },
        Command::Sweep { config, workers } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_sweep(&cfg, &config, workers)
        }
        Command::Analyze { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_analyze(&cfg, &config)
        }
        Command::Params { out } => commands::cmd_params(&out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
