//! Command-line entry point. Every subcommand is driven by a TOML run
//! configuration; `--seed`, `--method`, and `--checkpoint` override or
//! select where a stage supports it. Exit codes: 0 success, 2 bad
//! configuration or arguments, 3 missing or inconsistent data, 4 numeric
//! failure.

use clap::{Args, Parser};
use std::path::PathBuf;
use synth::commands;
use synth::config::RunConfig;
use synth::error::Result;

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the stage's seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Model family: diffusion, unet-l1, or pix2pix.
    #[arg(long)]
    method: Option<String>,
    /// Checkpoint directory to resume from or sample with.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "synth", version, about = "Conditional synthesis of T1-weighted volumes")]
enum Cli {
    /// Generate the procedural phantom cohort.
    Phantom(Common),
    /// Normalize raw volumes into training slice stacks.
    Preprocess(Common),
    /// Train the selected model on the train split.
    Train(Common),
    /// Synthesize volumes for the test split from a checkpoint.
    Sample(Common),
    /// Score synthesized volumes against the ground truth.
    Evaluate(Common),
    /// Compare cohort-level regressions between real and synthesized data.
    Biostats(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli {
        Cli::Phantom(c) => {
            let cfg = RunConfig::from_path(&c.config)?;
            commands::cmd_phantom(&cfg, c.seed)
        }
        Cli::Preprocess(c) => {
            let cfg = RunConfig::from_path(&c.config)?;
            commands::cmd_preprocess(&cfg)
        }
        Cli::Train(c) => {
            let cfg = RunConfig::from_path(&c.config)?;
            commands::cmd_train(&cfg, c.method.as_deref(), c.checkpoint.as_deref(), c.seed)
        }
        Cli::Sample(c) => {
            let cfg = RunConfig::from_path(&c.config)?;
            commands::cmd_sample(&cfg, c.checkpoint.as_deref(), c.seed)
        }
        Cli::Evaluate(c) => {
            let cfg = RunConfig::from_path(&c.config)?;
            commands::cmd_evaluate(&cfg)
        }
        Cli::Biostats(c) => {
            let cfg = RunConfig::from_path(&c.config)?;
            commands::cmd_biostats(&cfg, c.method.as_deref())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("synth: {e}");
        std::process::exit(e.exit_code());
    }
}
