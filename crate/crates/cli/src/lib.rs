//! Command-line front end: one subcommand per pipeline stage, all driven by a
//! single TOML run configuration.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "megloc", version, about = "MEG dipole localization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Directory for outputs; relative paths in the config resolve against it.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Build sensors, source grid and lead field.
    GenGeometry,
    /// Simulate a labeled dataset.
    GenData,
    /// Train a network model.
    Train,
    /// Localize one recording or dataset example.
    Localize,
    /// Accuracy sweep over SNR and correlation.
    Sweep,
    /// Accuracy under forward-model perturbation.
    PerturbSweep,
    /// Median localization time per algorithm.
    BenchTime,
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let config = config::load(cli.config.as_deref(), &cli.overrides).map_err(CliError::Config)?;
    if let Some(n) = cli.threads {
        megloc::par::configure_threads(n).map_err(CliError::Config)?;
    }
    eprintln!("# resolved config\n{}", config::to_toml(&config));
    std::fs::create_dir_all(&cli.out)?;
    let ctx = Context { config, out: cli.out.clone() };
    match cli.command {
        Command::GenGeometry => commands::gen_geometry(&ctx),
        Command::GenData => commands::gen_data(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Localize => commands::localize(&ctx),
        Command::Sweep => commands::sweep(&ctx),
        Command::PerturbSweep => commands::perturb_sweep(&ctx),
        Command::BenchTime => commands::bench_time(&ctx),
    }
}
