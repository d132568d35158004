//! `selagg`: feature extraction, attention analysis, probe training,
//! localization scoring, synthetic data and gradient checks.

mod analyze;
mod common;
mod error;
mod extract;
mod gradcheck;
mod localize;
mod overlay;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "selagg",
    version,
    about = "Selective aggregation toolkit for ViT token features"
)]
#[command(args_override_self = true)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SELAGG_THREADS")]
    threads: Option<usize>,
    /// JSON object of flag values; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Run a ViT over an image manifest and save per-image tokens.
    Extract(extract::ExtractArgs),
    /// Attention-flow metrics per block and selector divergences.
    Analyze(analyze::AnalyzeArgs),
    /// Train a linear probe with an aggregation head on frozen features.
    TrainProbe(train::TrainArgs),
    /// Score selection maps against ground-truth boxes (MaxBoxAccV2).
    Localize(localize::LocalizeArgs),
    /// Generate seeded synthetic datasets.
    Synth(synth::SynthArgs),
    /// Compare analytic and finite-difference probe gradients.
    Gradcheck(gradcheck::GradcheckArgs),
}

const SUBCOMMANDS: [&str; 6] = [
    "extract",
    "analyze",
    "train-probe",
    "localize",
    "synth",
    "gradcheck",
];

impl Command {
    fn seed(&self) -> Option<u64> {
        match self {
            Command::Extract(a) => Some(a.seed),
            Command::TrainProbe(a) => Some(a.seed),
            Command::Synth(a) => Some(a.seed),
            Command::Gradcheck(a) => Some(a.seed),
            Command::Analyze(_) | Command::Localize(_) => None,
        }
    }
}

fn parse() -> Result<Cli, ExitCode> {
    let args = match overlay::expand(std::env::args_os().collect(), &SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("selagg: {e}");
            return Err(ExitCode::from(e.code() as u8));
        }
    };
    let matches = Cli::command()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m));
    matches.map_err(|e| {
        let _ = e.print();
        ExitCode::from(if e.use_stderr() { 2 } else { 0 })
    })
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot start thread pool: {e}")))?;
    }
    let resolved = serde_json::to_string(&cli.command).unwrap_or_default();
    eprintln!("config: {resolved}");
    if let Some(seed) = cli.command.seed() {
        eprintln!("seed: {seed}");
    }
    match cli.command {
        Command::Extract(a) => extract::run(a),
        Command::Analyze(a) => analyze::run(a),
        Command::TrainProbe(a) => train::run(a),
        Command::Localize(a) => localize::run(a),
        Command::Synth(a) => synth::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match parse() {
        Ok(c) => c,
        Err(code) => return code,
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("selagg: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
