//! `miett`: capture preprocessing, synthetic traffic, training and evaluation
//! for the two-level attention flow classifier.

mod commands;
mod settings;

use std::fs;
use std::io;
use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use settings::{Common, ConfigFile};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] miett_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use miett_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::InvalidConfig(_) | E::InvalidPolicy(_) | E::InvalidPattern { .. }) => 2,
            CliError::Failed(_) | CliError::Core(_) => 1,
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub fn open_error(path: &Path, e: io::Error) -> CliError {
    if e.kind() == io::ErrorKind::NotFound {
        CliError::Usage(format!("{}: no such file", path.display()))
    } else {
        CliError::Failed(format!("{}: {e}", path.display()))
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| open_error(path, e))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| open_error(path, e))
}

/// Settings every subcommand sees after merging the config file and flags.
pub struct Context {
    pub file: ConfigFile,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Context {
    pub fn log_config(&self, command: &str, resolved: &impl Serialize) {
        let json = serde_json::json!({
            "command": command,
            "seed": self.seed,
            "threads": self.threads,
            "settings": resolved,
        });
        log::info!("resolved configuration: {json}");
    }
}

#[derive(Debug, Parser)]
#[command(name = "miett", version, about = "Encrypted traffic classification with a two-level attention transformer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn a pcap capture into a token dataset.
    Preprocess(commands::PreprocessArgs),
    /// Write a labeled synthetic capture.
    Synth(commands::SynthArgs),
    /// Self-supervised pre-training.
    Pretrain(commands::TrainCommand),
    /// Supervised fine-tuning of a classifier head.
    Finetune(commands::TrainCommand),
    /// Score a fine-tuned checkpoint on a labeled dataset.
    Evaluate(commands::EvaluateArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Attention cost of two-level versus flat attention.
    Benchmark(commands::BenchmarkArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = ConfigFile::load(cli.common.config.as_deref())?;
    let ctx = Context {
        seed: cli.common.seed.or(file.seed).unwrap_or(0),
        threads: cli.common.threads.or(file.threads),
        file,
    };
    if let Some(n) = ctx.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(e.to_string()))?;
    }
    match cli.command {
        Command::Preprocess(a) => commands::preprocess(&ctx, a),
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Pretrain(a) => commands::train(&ctx, miett_core::trainer::Stage::Pretrain, a),
        Command::Finetune(a) => commands::train(&ctx, miett_core::trainer::Stage::Finetune, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::Benchmark(a) => commands::benchmark(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
