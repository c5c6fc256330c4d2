//! `sd3`: pretraining, ablations, adaptation and verification suites.
//!
//! Exit codes: 0 on success, 1 when a verification suite fails, 2 on any
//! other error (bad config, missing artifact, training failure).

// NaN-rejecting validation reads `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{Outcome, Parameter, Suite};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "sd3", version, about = "Skill discovery by state-density deviation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output (or run) directory, overriding `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load_or_default(self.config.as_deref())?.with_overrides(self.out.as_deref(), self.seed))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain skills for every configured seed and write the run artifacts.
    Pretrain(Common),
    /// Run a verification suite and write its JSON report.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep one hyperparameter over its fixed grid.
    Ablate {
        #[arg(value_enum)]
        parameter: Parameter,
        #[command(flatten)]
        common: Common,
    },
    /// Select a skill for the goal task and fine-tune it.
    Adapt(Common),
    /// Regenerate trajectories, occupancy, SVG and report from a checkpoint.
    Export(Common),
    /// Print the default configuration.
    DefaultConfig,
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Pretrain(c) => commands::cmd_pretrain(&c.load()?).map(|_| Outcome::Pass),
        Command::Verify { suite, common } => commands::cmd_verify(&common.load()?, suite),
        Command::Ablate { parameter, common } => {
            commands::cmd_ablate(&common.load()?, parameter).map(|_| Outcome::Pass)
        }
        Command::Adapt(c) => commands::cmd_adapt(&c.load()?).map(|_| Outcome::Pass),
        Command::Export(c) => commands::cmd_export(&c.load()?).map(|_| Outcome::Pass),
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
            Ok(Outcome::Pass)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
