mod config;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use intensity_core::exec::Exec;

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::stages::{Ctx, Stage};

/// Emotion-intensity pipeline: synthetic corpus, labels, windows, scorer,
/// adaptation and reports.
#[derive(Debug, Parser)]
#[command(name = "intensity", version)]
struct Cli {
    /// JSON config file; merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding stage outputs.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Seed for the stage being run (gen, split, train, adapt, grad-check).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override as a dotted key, e.g. `--set scorer.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Print the stage summary as one JSON line.
    #[arg(long, global = true)]
    json: bool,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and the new-subject cohort.
    Gen,
    /// Normalize action units into per-frame intensity labels.
    Label,
    /// Cut labeled recordings into fixed-length windows.
    Segment,
    /// Add transitional windows to under-represented classes.
    Augment,
    /// Split windows into training and validation subjects.
    Split,
    /// Train the intensity scorer.
    Train,
    /// Fine-tune the scorer on each new subject's neutral windows.
    Adapt,
    /// Score the validation windows.
    Eval,
    /// Render charts and a summary from eval and adapt.
    Report,
    /// Compare analytic and numeric gradients of a fresh scorer.
    GradCheck,
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Command::Gen => Stage::Gen,
            Command::Label => Stage::Label,
            Command::Segment => Stage::Segment,
            Command::Augment => Stage::Augment,
            Command::Split => Stage::Split,
            Command::Train => Stage::Train,
            Command::Adapt => Stage::Adapt,
            Command::Eval => Stage::Eval,
            Command::Report => Stage::Report,
            Command::GradCheck => Stage::GradCheck,
        }
    }
}

/// Where `--seed` lands for each stage.
fn seed_key(stage: Stage) -> Option<&'static str> {
    match stage {
        Stage::Gen => Some("corpus.seed"),
        Stage::Split => Some("split.seed"),
        Stage::Train => Some("scorer.seed"),
        Stage::Adapt => Some("adapt.seed"),
        Stage::GradCheck => Some("grad_check.seed"),
        _ => None,
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    let stage = cli.command.stage();
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        let key = seed_key(stage)
            .ok_or_else(|| CliError::Invalid(format!("`{}` takes no seed", stage.name())))?;
        overrides.push(format!("{key}={seed}"));
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    let work = cli
        .work_dir
        .clone()
        .or_else(|| cfg.paths.work_dir.clone())
        .unwrap_or_else(|| PathBuf::from("work"));
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let ctx = Ctx { cfg, work, exec };
    let outcome = stages::run(&ctx, stage)?;
    Ok(if cli.json {
        outcome.to_json().to_string() + "\n"
    } else {
        outcome.to_text()
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                ErrorKind::InvalidSubcommand => 64,
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 1,
                _ => 1,
            });
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
