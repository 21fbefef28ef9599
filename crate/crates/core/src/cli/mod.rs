mod config;
mod synth;
mod tools;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dialogue_forge::jsonl::JsonlError;
use dialogue_forge::pipeline::SynthesisError;

pub use config::{Overrides, PipelineConfig};

/// Errors that select a specific exit code.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Violations(String),
}

pub const EXIT_VIOLATIONS: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_BACKEND: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => EXIT_CONFIG,
                Failure::Backend(_) => EXIT_BACKEND,
                Failure::Violations(_) => EXIT_VIOLATIONS,
            };
        }
        if cause.is::<JsonlError>() || cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        if cause
            .downcast_ref::<SynthesisError>()
            .is_some_and(SynthesisError::is_backend_failure)
        {
            return EXIT_BACKEND;
        }
    }
    EXIT_VIOLATIONS
}

#[derive(Debug, Parser)]
#[command(
    name = "dforge",
    version,
    about = "Build, check, serialize and pack synthetic image dialogues"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one or more synthesis stages.
    Synthesize(Box<synth::SynthArgs>),
    /// Check dialogues (or streams with --streams) and report violations.
    Validate(tools::ValidateArgs),
    /// Turn dialogues into typed token-block streams.
    Serialize(tools::SerializeArgs),
    /// Export attention masks of streams, run-length encoded or dense.
    Mask(tools::MaskArgs),
    /// Draw a weighted mixture of serialized corpora and pack it.
    Pack(tools::PackArgs),
    /// Summarize a dialogue corpus.
    Stats(tools::StatsArgs),
}

/// Entry point shared by `main`.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synthesize(a) => synth::run(*a),
        Command::Validate(a) => tools::validate(a),
        Command::Serialize(a) => tools::serialize(a),
        Command::Mask(a) => tools::mask(a),
        Command::Pack(a) => tools::pack(a),
        Command::Stats(a) => tools::stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    path.ok_or_else(|| Failure::Config(format!("missing required flag {flag}")))
}
