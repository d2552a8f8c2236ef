//! Experiment runner for the `tslab` laboratory.
//!
//! Every subcommand reads a TOML [`config::ExperimentConfig`], writes into
//! `<output root>/<name>/` and finishes with a `manifest.json` hashing inputs
//! and outputs.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod plot;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use tslab::trainer::RegimeKind;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::io::RunDir;

#[derive(Debug, Parser)]
#[command(name = "tslab", version, about = "Time-series transfer laboratory")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory name under the output root; defaults to the subcommand.
    #[arg(long, global = true)]
    pub name: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RegimeArg {
    Full,
    IoOnly,
    LoraAttn,
    LoraAttnIo,
}

impl From<RegimeArg> for RegimeKind {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Full => RegimeKind::Full,
            RegimeArg::IoOnly => RegimeKind::IoOnly,
            RegimeArg::LoraAttn => RegimeKind::LoraAttn,
            RegimeArg::LoraAttnIo => RegimeKind::LoraAttnIo,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the token corpus, window sets and waveform bank.
    Datagen,
    /// Pretrain on the toy-language corpus.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Finetune on forecasting windows, from a checkpoint or a fresh init.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
    },
    /// Forecast metrics on held-out windows.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Effective rank, phase coherence, PCA trajectories and CKA.
    Geometry {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
    },
    /// Fit the waveform probe across the 2x2 ablation.
    Probe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Retrieval forecasting with a fitted probe.
    Retrieve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        probe: PathBuf,
    },
    /// Train a crosscoder between two checkpoints' activations.
    Crosscoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
    },
    /// Component ablations, composition and circuit transfer.
    Circuits {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Pretrained-versus-random transfer study over the configured seeds.
    Transfer,
    /// Merge run directories into figures and a markdown summary.
    Report {
        #[arg(long, required = true)]
        run: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Datagen => "datagen",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Geometry { .. } => "geometry",
            Command::Probe { .. } => "probe",
            Command::Retrieve { .. } => "retrieve",
            Command::Crosscoder { .. } => "crosscoder",
            Command::Circuits { .. } => "circuits",
            Command::Transfer => "transfer",
            Command::Report { .. } => "report",
        }
    }
}

/// Runs one subcommand and returns its run directory.
pub fn run(cli: Cli) -> Result<PathBuf> {
    use commands::{analysis, data, summary, training};
    let path = cli.config.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Command::Finetune { regime: Some(r), .. } = &cli.command {
        cfg.trainer.regime.kind = (*r).into();
        cfg.validate()?;
    }
    let name = cli.name.unwrap_or_else(|| cli.command.name().into());
    let mut dir = RunDir::create(&cfg, &name, cli.command.name())?;
    let d = &mut dir;
    match &cli.command {
        Command::Datagen => data::datagen(&cfg, d)?,
        Command::Pretrain { data } => training::pretrain(&cfg, d, data)?,
        Command::Finetune { data, init, .. } => training::finetune(&cfg, d, data, init.as_deref())?,
        Command::Evaluate { data, checkpoint } => training::evaluate(&cfg, d, data, checkpoint)?,
        Command::Geometry { data, checkpoint } => analysis::geometry(&cfg, d, data, checkpoint)?,
        Command::Probe { data, checkpoint } => analysis::probe(&cfg, d, data, checkpoint)?,
        Command::Retrieve { data, probe } => analysis::retrieve(&cfg, d, data, probe)?,
        Command::Crosscoder { data, base, finetuned } => analysis::crosscoder(&cfg, d, data, base, finetuned)?,
        Command::Circuits { data, checkpoint } => analysis::circuits(&cfg, d, data, checkpoint)?,
        Command::Transfer => {
            training::transfer(&cfg, d)?;
        }
        Command::Report { run } => summary::report(d, run)?,
    }
    let out = dir.path.clone();
    dir.finish()?;
    Ok(out)
}
