//! Benchmark and training front end for the b2opt optimizer.

mod commands;
mod config;
mod output;
mod runner;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "b2opt", version, about = "Learned population-based black-box optimizer: train, benchmark, export")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; all per-run seeds derive from it.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Output directory (overrides [run] out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for grid execution (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on surrogate functions or arm targets; writes a
    /// checkpoint and the loss log.
    Train,
    /// Run one algorithm on one task over repeated seeds.
    Optimize,
    /// Cross-product benchmark grid: algos x functions x dims.
    Bench,
    /// Arm study over modes and target radii.
    Arm,
    /// Train and evaluate every ablation variant.
    Ablate,
    /// Dump per-block attention matrices and population snapshots.
    ExportViz,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config_path = cli.config.context("--config <path> is required")?;
    let (config, raw) = ExperimentConfig::load(&config_path)?;
    let config_dir = config_path.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    let out_dir = cli.out.unwrap_or_else(|| config.run.out_dir.clone());
    std::fs::create_dir_all(&out_dir)?;

    let ctx = commands::Ctx { config, raw, config_dir, out_dir, master_seed: cli.seed };

    let mut pool = rayon::ThreadPoolBuilder::new();
    if cli.threads > 0 {
        pool = pool.num_threads(cli.threads);
    }
    let pool = pool.build().context("building worker pool")?;

    pool.install(|| match cli.command {
        Command::Train => commands::cmd_train(&ctx),
        Command::Optimize => commands::cmd_optimize(&ctx),
        Command::Bench => commands::cmd_bench(&ctx),
        Command::Arm => commands::cmd_arm(&ctx),
        Command::Ablate => commands::cmd_ablate(&ctx),
        Command::ExportViz => commands::cmd_export_viz(&ctx),
    })
}
