//! Command-line front end: synthesize or ingest databases, train heads,
//! evaluate, reduce with PCA and tabulate results.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "placerec", version, about = "Place recognition experiments on precomputed feature maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate a synthetic database.
    Synth,
    /// Validate a CSV manifest (plus optional feature stack) into a database.
    BuildDb,
    /// Train an aggregation head.
    Train,
    /// Recall@k of a checkpoint on a database, or of two descriptor sets.
    Eval,
    /// Fit PCA whitening and apply it to descriptor sets.
    Reduce,
    /// Tabulate eval results.
    Report,
}

/// Resolves the config, writes it into the output directory, then runs
/// the command.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = config::resolve(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let out = cli.out.as_ref().context("--out is required")?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    config::write_resolved(&cfg, out)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg, out),
        Command::BuildDb => commands::build_db(&cfg, out),
        Command::Train => commands::train(&cfg, out),
        Command::Eval => commands::eval(&cfg, out),
        Command::Reduce => commands::reduce(&cfg, out),
        Command::Report => commands::report(&cfg, out),
    }
}
