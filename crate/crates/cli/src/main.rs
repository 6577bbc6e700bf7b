//! `fedtensor`: typecheck, run, plan and train federated tensor programs.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Failure, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(name = "fedtensor", version, about = "Typed tensor programs over federated data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Typecheck and validate a program; print its output type.
    Check { program: PathBuf },
    /// Evaluate a program on a data document.
    Run(RunArgs),
    /// Extract the encode/merge/decode plan of a one-round program.
    Plan(PlanArgs),
    /// Fit a logistic or Gaussian linear model with a federated optimizer.
    Train(TrainArgs),
    /// Run the randomized property suites at reduced trial counts.
    Selfcheck(SelfcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Distributed,
    Centralized,
    Both,
}

#[derive(Args, Debug, Clone)]
pub struct DpArgs {
    /// gaussian-central, laplace-central or gaussian-local.
    #[arg(long)]
    pub dp_kind: Option<String>,
    /// per-client-message, merged-state or decoded-output.
    #[arg(long)]
    pub dp_placement: Option<String>,
    /// Noise scale (σ, or b for Laplace). Overrides calibration.
    #[arg(long)]
    pub dp_sigma: Option<f64>,
    #[arg(long)]
    pub dp_epsilon: Option<f64>,
    #[arg(long)]
    pub dp_delta: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub dp_sensitivity: f64,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    pub program: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Distributed)]
    pub mode: Mode,
    /// Relative tolerance for `--mode both`.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Send serialized messages through the in-process federation simulator.
    #[arg(long)]
    pub simulate: bool,
    /// Write the simulator's message ledger (one JSON object per line).
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    #[command(flatten)]
    pub dp: DpArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    pub program: PathBuf,
    /// Write the full plan document here.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Round to extract from an iterative program (0-based).
    #[arg(long, default_value_t = 0)]
    pub round: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Logistic,
    Gaussian,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Federated input holding features with the response in the last column.
    #[arg(long, default_value = "x")]
    pub input: String,
    #[arg(long, value_enum, default_value_t = Model::Logistic)]
    pub model: Model,
    /// Noise variance of the Gaussian model.
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    /// gd, momentum, adam or newton.
    #[arg(long, default_value = "gd")]
    pub optimizer: String,
    #[arg(long, default_value_t = 50)]
    pub rounds: usize,
    #[arg(long, default_value_t = 0.1)]
    pub eta: f64,
    /// Damping added to the curvature block (newton only).
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// `zeros` or a tensor document.
    #[arg(long, default_value = "zeros")]
    pub theta0: String,
    /// Include θ and the loss after every round.
    #[arg(long)]
    pub trace: bool,
    #[arg(long)]
    pub simulate: bool,
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    #[command(flatten)]
    pub dp: DpArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 25)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// `FEDTENSOR_SEED` wins over `--seed` when set.
fn effective_seed(flag: u64) -> Result<u64, Failure> {
    match std::env::var("FEDTENSOR_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("FEDTENSOR_SEED is not an unsigned integer: `{v}`"))),
        Err(_) => Ok(flag),
    }
}

fn dispatch(cli: Cli) -> Result<commands::Reply, Failure> {
    match cli.command {
        Command::Check { program } => commands::check(&program),
        Command::Run(mut a) => {
            a.seed = effective_seed(a.seed)?;
            commands::run(&a)
        }
        Command::Plan(a) => commands::plan(&a),
        Command::Train(mut a) => {
            a.seed = effective_seed(a.seed)?;
            commands::train(&a)
        }
        Command::Selfcheck(mut a) => {
            a.seed = effective_seed(a.seed)?;
            commands::selfcheck(&a)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    match dispatch(cli) {
        Ok((out, failure)) => {
            println!("{}", serde_json::to_string_pretty(&out).expect("json values serialize"));
            match failure {
                Some(f) => {
                    eprintln!("error: {f}");
                    ExitCode::from(f.code as u8)
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
