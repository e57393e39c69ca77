//! The `qroute` command line.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
//! 3 numerical abort during training.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use qroute_model::Config;

pub mod error;
pub mod eval;
pub mod generate;
pub mod params;
pub mod train;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "qroute", version, about = "Attention-based CVRP solver with simulated circuit blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write uniformly random instances, one JSON object per line.
    Generate(GenerateArgs),
    /// Train with clipped-surrogate PPO.
    Train(TrainArgs),
    /// Compare a trained model with the baselines on an instance file.
    Eval(EvalArgs),
    /// Trainable parameter counts of a configuration and its classical reference.
    Params(ParamsArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Customers per instance.
    #[arg(long)]
    pub m: usize,
    #[arg(long, default_value_t = 30)]
    pub capacity: u32,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Parallelism {
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "QROUTE_THREADS", default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides `ppo.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record elapsed seconds in the metrics file (which then differs between runs).
    #[arg(long)]
    pub wall_clock: bool,
    #[command(flatten)]
    pub parallel: Parallelism,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalStrategy {
    Greedy,
    Sample,
    Both,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub instances: PathBuf,
    /// Configuration of the checkpointed model; defaults to the resolved
    /// configuration saved beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalStrategy::Both)]
    pub strategy: EvalStrategy,
    /// CSV of externally computed lengths (`instance_id,method,length`).
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Method in the references file that defines the gap; defaults to its first.
    #[arg(long, requires = "references")]
    pub reference_method: Option<String>,
    /// Sampled routes per instance; defaults to `decoder.sample_width`.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the results table and its metadata.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub parallel: Parallelism,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Defaults to the built-in quantum configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// One of qsim, encoder, critic, ppo, all.
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read configuration {}: {e}", path.display())))?;
    Config::from_json(&text).map_err(|e| CliError::usage(format!("invalid configuration {}: {e}", path.display())))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Params(a) => params::run(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let scope = args.scope.parse().map_err(CliError::Usage)?;
    let reports = qroute_model::gradcheck::run(scope, args.seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!("{r}");
        if !r.passed {
            failed.push(r.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed:\n{}", failed.join("\n"))))
    }
}
