//! `owlet`: synthetic data, anchor mining, low-light enhancement, evaluation and gradient checks.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AnchorsArgs, EnhanceArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs};
use config::{layer, FileConfig};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// A rejected input or setting; exits with code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Debug, Parser)]
#[command(name = "owlet", version, about)]
struct Cli {
    /// Seed for every random choice [default: 0; gradcheck fixtures: 1].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file; command-line flags take precedence over it.
    #[arg(long, global = true, env = "OWLET_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled synthetic bird dataset with a train/val/test split.
    Synth(SynthArgs),
    /// Mine anchor boxes from dataset labels with k-means++.
    Anchors(AnchorsArgs),
    /// Train the decomposition and enhancement networks.
    TrainRetinex(TrainArgs),
    /// Enhance a low-light image with trained models.
    Enhance(EnhanceArgs),
    /// Score detections against ground truth (precision, recall, AP, mAP).
    Eval(EvalArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return EXIT_VALIDATION;
    }
    match err.downcast_ref::<owlet::Error>() {
        Some(owlet::Error::InvalidArgument(_) | owlet::Error::Parse { .. } | owlet::Error::Shape(_)) => {
            EXIT_VALIDATION
        }
        _ => EXIT_RUNTIME,
    }
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed);
    let base_seed = seed.unwrap_or(0);
    match &cli.command {
        Command::Synth(a) => commands::synth(&layer(a, file.synth.as_ref())?, base_seed),
        Command::Anchors(a) => commands::anchors(&layer(a, file.anchors.as_ref())?, base_seed),
        Command::TrainRetinex(a) => commands::train_retinex(&layer(a, file.train_retinex.as_ref())?, base_seed),
        Command::Enhance(a) => commands::enhance(&layer(a, file.enhance.as_ref())?),
        Command::Eval(a) => commands::eval(&layer(a, file.eval.as_ref())?),
        Command::Gradcheck(a) => commands::gradcheck(
            &layer(a, file.gradcheck.as_ref())?,
            seed.unwrap_or(owlet::checks::DEFAULT_SEED),
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
