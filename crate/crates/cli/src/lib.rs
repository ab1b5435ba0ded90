//! Command-line pipeline runner: `parse`, `prepare`, `train`, `score`,
//! `evaluate`, `ablate` and `synth` over one flat run configuration.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use logsd::{Error, Result};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "logsd", version, about = "Semi-supervised log anomaly detection")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the `out_dir` key.
    #[arg(long = "out-dir", global = true)]
    pub out_dir: Option<PathBuf>,
    /// Overrides any key, e.g. `--set max_epochs=30`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine templates from a raw log file.
    Parse {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output directory (defaults to `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Group parsed records into sequences and split train/test.
    Prepare,
    /// Train a model on the normal training sequences.
    Train,
    /// Score the test sequences with a trained checkpoint.
    Score,
    /// Threshold-moving evaluation of a score file.
    Evaluate,
    /// Train and evaluate every listed variant.
    Ablate,
    /// Generate the synthetic dominant-event corpus.
    Synth,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        Error::Io { .. } | Error::Data(_) | Error::DegenerateLabels(_) => 1,
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    for item in &cli.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {item:?}")))?;
        overrides.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".to_owned(), seed.to_string()));
    }
    if let Some(dir) = &cli.out_dir {
        overrides.push(("out_dir".to_owned(), dir.display().to_string()));
    }
    base.with_overrides(overrides)
}

pub fn run(cli: &Cli) -> Result<String> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Parse { input, out } => commands::cmd_parse(&cfg, input.as_deref(), out.as_deref()),
        Command::Prepare => commands::cmd_prepare(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Score => commands::cmd_score(&cfg),
        Command::Evaluate => commands::cmd_evaluate(&cfg),
        Command::Ablate => commands::cmd_ablate(&cfg),
        Command::Synth => commands::cmd_synth(&cfg),
    }
}
