//! plategp: simulate plate arrival-difference data, fit the pooling regimes by
//! MCMC, and score their predictions, all driven by one TOML config.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use plategp::datagen::DataError;
use plategp::eval::EvalError;
use plategp::inference::SamplerError;
use plategp::model::ModelError;

use commands::Ctx;
use config::RunConfig;

/// Failure classes with fixed exit codes: 2 config/usage, 3 numerical,
/// 4 convergence.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Convergence(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Convergence(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            CliError::Convergence(msg) => write!(f, "convergence failure: {msg}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match &e {
            SamplerError::Config(_) | SamplerError::DrawsFile { .. } | SamplerError::Io { .. } => {
                CliError::Config(e.to_string())
            }
            SamplerError::Init(_) | SamplerError::Numerical(_) => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Domain(msg) => CliError::Config(msg),
            EvalError::Data(d) => d.into(),
            EvalError::Sampler(s) => s.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Gp(g) => CliError::Numerical(g.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "plategp",
    version,
    about = "Simulate, fit, and score hierarchical multitask GP regressions \
             on plate arrival-difference data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the sensor-pair population and write the dataset files
    Generate(Common),
    /// Run MCMC for the configured regime on the training tasks
    Fit(Common),
    /// Write per-point predictive summaries from a saved posterior
    Predict(Common),
    /// Score each configured method's posterior on the test splits
    Evaluate(Common),
    /// Budget-curve transfer experiment on the hold-out tasks
    Transfer(Common),
}

#[derive(Args)]
struct Common {
    /// Path to the run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override every seed in the config (plate, sampler, eval)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides io.out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep going when split-Rhat exceeds 1.05 or is undefined
    #[arg(long)]
    allow_nonconverged: bool,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Generate(c)
        | Command::Fit(c)
        | Command::Predict(c)
        | Command::Evaluate(c)
        | Command::Transfer(c) => c,
    };
    let mut cfg = RunConfig::load(&common.config)?;
    cfg.apply_overrides(common.seed, common.out.clone());
    let cfg = cfg.effective();
    let out = cfg.io.out_dir.clone();
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
    let ctx = Ctx {
        cfg,
        out,
        allow_nonconverged: common.allow_nonconverged,
    };
    ctx.cfg.dump_effective(&ctx.out)?;
    match &cli.command {
        Command::Generate(_) => commands::cmd_generate(&ctx),
        Command::Fit(_) => commands::cmd_fit(&ctx),
        Command::Predict(_) => commands::cmd_predict(&ctx),
        Command::Evaluate(_) => commands::cmd_evaluate(&ctx),
        Command::Transfer(_) => commands::cmd_transfer(&ctx),
    }
}
