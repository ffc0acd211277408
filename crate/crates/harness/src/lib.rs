//! Experiment driver: synthesizes data, trains the three representation
//! methods, evaluates them and exports latent summaries.

pub mod commands;
pub mod config;
pub mod runs;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Method, Overrides};

#[derive(Debug, Parser)]
#[command(name = "ensrep", version, about = "Distributional representations of ensemble fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment configuration; flags below take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub method: Option<Method>,
    /// Restrict the run to a single latent dimension.
    #[arg(long, global = true)]
    pub latent_dim: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run directory holding the skill-score reference report.
    #[arg(long, global = true)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate the synthetic data set.
    Synth,
    Train,
    Evaluate,
    /// Sweep the Sinkhorn weight of the invariant VAE.
    Ablate,
    ExportLatents,
}

impl Cli {
    /// The configuration after applying flags. For `synth`, `--seed` sets the
    /// generator seed; otherwise it sets the model seed.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut o = Overrides {
            method: self.method,
            latent_dim: self.latent_dim,
            seed: self.seed,
            out: self.out.clone(),
            reference: self.reference.clone(),
        };
        if matches!(self.command, Command::Synth) {
            if let Some(s) = o.seed.take() {
                cfg.dataset.synthetic.seed = s;
            }
        }
        cfg.apply(&o);
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = cli.resolve()?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::ExportLatents => commands::export_latents(&cfg),
    }
}
