//! Command-line experiments for IBP-VAE, cIBP-VAE and the Gaussian β-VAE:
//! training with checkpoints, MIG and TC-D evaluation, and image grids.

// Parameter checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod datasets;
pub mod error;
pub mod image;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::Overrides;
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "ibpvae", version, about = "Train and evaluate IBP-VAE models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset: dsprites, colored-mnist or mig-oracle.
    #[arg(long)]
    pub dataset: Option<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            config: self.config.clone(),
            out: self.out.clone(),
            seed: self.seed,
            dataset: self.dataset.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; with --checkpoint, resume from it.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write mig.json for a checkpoint, or for raw mig-oracle codes.
    EvalMig {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write tcd.csv with one TC-D point per checkpoint.
    Tcd {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Write traverse.png: latent traversals of one image.
    Traverse {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write trigger.png: input, reconstruction, and one unit switched off.
    Trigger {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Run a parsed command, printing a one-line result to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { common, checkpoint } => {
            let s = commands::train(&common.overrides(), checkpoint.as_deref())?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::EvalMig { common, checkpoint } => {
            let m = commands::eval_mig(&common.overrides(), checkpoint.as_deref())?;
            println!(
                "mig {:.6} gaps {:?}",
                m.report.mig_score, m.report.per_factor_gap
            );
        }
        Command::Tcd {
            common,
            checkpoints,
        } => {
            for p in commands::tcd(&common.overrides(), &checkpoints)? {
                println!(
                    "{} beta {} seed {}: tc {:.4} distortion {:.4}",
                    p.model_kind.as_str(),
                    p.beta,
                    p.seed,
                    p.total_correlation,
                    p.distortion
                );
            }
        }
        Command::Traverse { common, checkpoint } => {
            println!(
                "{}",
                commands::traverse(&common.overrides(), &checkpoint)?.display()
            );
        }
        Command::Trigger { common, checkpoint } => {
            println!(
                "{}",
                commands::trigger(&common.overrides(), &checkpoint)?.display()
            );
        }
    }
    Ok(())
}
