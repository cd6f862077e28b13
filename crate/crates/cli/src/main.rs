use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use morphlab::fr::Role;
use morphlab::pipeline::{exit_code, Pipeline, RunConfig, Stage};
use morphlab::{Error, Result};

/// Worst-case face morphing experiments on synthetic faces.
///
/// Log verbosity is read from MORPHLAB_LOG (e.g. `info`, `debug`).
#[derive(Parser, Debug)]
#[command(name = "morphlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (`key = value` lines); defaults apply otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding all artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Training epochs for train-fr or train-morpher.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Number of morph pairs.
    #[arg(long, global = true)]
    pairs: Option<usize>,
    /// Latent refinement iterations.
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Latent refinement step size.
    #[arg(long, global = true)]
    step: Option<f64>,
    /// Restrict train-fr / calibrate to one FR system (white or black).
    #[arg(long, global = true)]
    role: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Render the synthetic face dataset.
    GenData,
    /// Train the white-box and black-box FR systems.
    TrainFr,
    /// Calibrate decision thresholds on the validation split.
    Calibrate,
    /// Train the encoder/decoder morpher against the white-box FR.
    TrainMorpher,
    /// Select pairs and generate blend, approximate and theoretical morphs.
    Morph,
    /// Refine approximate morphs in latent space.
    Refine,
    /// Score all morphs under both FR systems.
    Evaluate,
    /// Render summary tables and figures.
    Report,
    /// Every stage in order.
    All,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::GenData => Stage::GenData,
            Command::TrainFr => Stage::TrainFr,
            Command::Calibrate => Stage::Calibrate,
            Command::TrainMorpher => Stage::TrainMorpher,
            Command::Morph => Stage::Morph,
            Command::Refine => Stage::Refine,
            Command::Evaluate => Stage::Evaluate,
            Command::Report => Stage::Report,
            Command::All => return None,
        })
    }
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = cli.epochs {
        match cli.command {
            Command::TrainFr => cfg.fr_epochs = e,
            Command::TrainMorpher => cfg.morph_epochs = e,
            Command::All => {
                cfg.fr_epochs = e;
                cfg.morph_epochs = e;
            }
            _ => return Err(Error::arg("--epochs only applies to train-fr, train-morpher or all")),
        }
    }
    if let Some(p) = cli.pairs {
        cfg.pairs = p;
    }
    if let Some(i) = cli.iters {
        cfg.iters = i;
    }
    if let Some(s) = cli.step {
        cfg.step = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let role: Option<Role> = cli.role.as_deref().map(str::parse).transpose()?;
    let pipeline = Pipeline::new(config(cli)?, &cli.out)?;
    match cli.command.stage() {
        Some(stage) => pipeline.run(stage, role),
        None => pipeline.run_all(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MORPHLAB_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
