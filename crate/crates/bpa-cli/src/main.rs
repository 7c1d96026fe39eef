//! Command-line driver. Every subcommand resolves the same TOML run config,
//! binds to the run directory derived from its hash and seed, and executes
//! one pipeline stage.

use std::path::PathBuf;
use std::process::exit;

use clap::{Parser, Subcommand};

use bpa_core::config::{device_from_env, load_config, CliOverrides};
use bpa_core::dataset::ConditionId;
use bpa_core::pipeline::{self, RunContext};
use bpa_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bpa",
    version,
    about = "Two-phase GAN augmentation pipeline for dermoscopic lesion imagery"
)]
struct Cli {
    /// Path to the run config (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output root directory.
    #[arg(long, global = true, value_name = "DIR")]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the configured image pools into the run directory
    Ingest,
    /// Train the progressive bulk generator on the real nevus pool
    TrainBulk,
    /// Sample the trained bulk generator into the generated-base pools
    GenerateNevus,
    /// Train the cycle-consistent structure translator
    TrainTransfer,
    /// Translate real nevi and generated bases into the structure domain
    ApplyTransfer,
    /// Assemble per-condition training datasets from the pools
    BuildDataset {
        /// Build a single condition (A, B, C, or D) instead of all
        #[arg(long)]
        condition: Option<ConditionId>,
    },
    /// Train one structure detector per condition
    TrainApn {
        /// Train a single condition (A, B, C, or D) instead of all
        #[arg(long)]
        condition: Option<ConditionId>,
    },
    /// Train the malignancy grader on the diagnosis-labeled pools
    TrainGrader,
    /// Score every condition's detector on the held-out test pools
    EvalApn,
    /// Compare grader score distributions across real and generated pools
    EvalGrading,
    /// Render the metric, ROC, and histogram tables plus the run summary
    Report,
}

fn run(cli: Cli) -> Result<Vec<String>> {
    device_from_env()?;
    let config_path = cli
        .config
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let overrides = CliOverrides {
        seed: cli.seed,
        output_root: cli.output_root,
    };
    let cfg = load_config(&config_path, &overrides)?;
    let ctx = RunContext::create(cfg)?;
    match cli.command {
        Command::Ingest => pipeline::stage_ingest(&ctx),
        Command::TrainBulk => pipeline::stage_train_bulk(&ctx),
        Command::GenerateNevus => pipeline::stage_generate_nevus(&ctx),
        Command::TrainTransfer => pipeline::stage_train_transfer(&ctx),
        Command::ApplyTransfer => pipeline::stage_apply_transfer(&ctx),
        Command::BuildDataset { condition } => pipeline::stage_build_dataset(&ctx, condition),
        Command::TrainApn { condition } => pipeline::stage_train_apn(&ctx, condition),
        Command::TrainGrader => pipeline::stage_train_grader(&ctx),
        Command::EvalApn => pipeline::stage_eval_apn(&ctx),
        Command::EvalGrading => pipeline::stage_eval_grading(&ctx),
        Command::Report => pipeline::stage_report(&ctx),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit(e.exit_code());
        }
    }
}
