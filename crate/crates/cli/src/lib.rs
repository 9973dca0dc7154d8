//! Batch front end for vitforge: config parsing, the five commands and
//! their report files.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "vitforge", version, about = "Vision Transformer fine-tuning toolkit")]
pub struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Root seed for every random choice.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// k-fold cross-validation with per-fold and average metrics.
    Crossval,
    /// Train on one split and save the best checkpoint.
    Train,
    /// Evaluate `checkpoint_in` on the dataset.
    Eval,
    /// Classify images with `checkpoint_in`.
    Predict {
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Validate a checkpoint file (defaults to `checkpoint_in`).
    ConvertCheck { checkpoint: Option<PathBuf> },
}

pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.set, cli.seed)?;
    match &cli.command {
        Command::Crossval => commands::crossval(&cfg, out, err),
        Command::Train => commands::train_cmd(&cfg, out, err),
        Command::Eval => commands::eval(&cfg, out, err),
        Command::Predict { images } => commands::predict(&cfg, images, out, err).map(|_| ()),
        Command::ConvertCheck { checkpoint } => {
            let path = checkpoint.clone().or(cfg.checkpoint_in).ok_or_else(|| {
                CliError::Config("convert-check needs a path or checkpoint_in".into())
            })?;
            commands::convert_check(&path, out)
        }
    }
}
