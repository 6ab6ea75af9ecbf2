//! `qrn`: quantum repeater network simulator.
//!
//! Every subcommand reads one TOML config and writes one result file.
//! Progress goes to stdout, errors to stderr. Exit codes: 0 success,
//! 2 configuration problem, 3 numeric or degenerate-model failure,
//! 4 event-budget timeout, 1 anything else.

mod config;
mod emit;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};
use crate::run::RunArgs;

#[derive(Parser)]
#[command(name = "qrn", version, about = "Quantum repeater network simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Evaluate the repeater chain semi-analytically (JSON output).
    Simulate(CommonArgs),
    /// Sample full trajectories stochastically (JSON output).
    Mc(CommonArgs),
    /// Optimize parameters over a distance/coherence grid (CSV output).
    Sweep(CommonArgs),
    /// Optimize parameters at a single operating point (CSV output).
    Optimize(CommonArgs),
    /// Tabulate the completion-time distribution of one level (CSV output).
    Pdf(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Result file (default depends on the subcommand).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed; overrides the config for stochastic commands.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: QRN_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Include density matrices in JSON output.
    #[arg(long)]
    dump_states: bool,
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, ConfigError> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("QRN_THREADS") {
        Ok(s) => s
            .parse::<usize>()
            .map(Some)
            .map_err(|_| ConfigError(format!("QRN_THREADS must be an integer, got \"{s}\""))),
        Err(_) => Ok(None),
    }
}

fn dispatch(cmd: &Cmd) -> anyhow::Result<()> {
    let common = match cmd {
        Cmd::Simulate(a) | Cmd::Mc(a) | Cmd::Sweep(a) | Cmd::Optimize(a) | Cmd::Pdf(a) => a,
    };
    if let Some(n) = thread_count(common.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError(format!("thread pool: {e}")))?;
    }
    let args = RunArgs {
        config: RunConfig::load(&common.config)?,
        out: common.out.clone(),
        seed: common.seed,
        dump_states: common.dump_states,
    };
    match cmd {
        Cmd::Simulate(_) => run::simulate(&args),
        Cmd::Mc(_) => run::mc(&args),
        Cmd::Sweep(_) => run::sweep_cmd(&args),
        Cmd::Optimize(_) => run::optimize(&args),
        Cmd::Pdf(_) => run::pdf(&args),
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<qrn_core::Error>() {
        Some(qrn_core::Error::InvalidArgument(_)) => 2,
        Some(qrn_core::Error::Numeric { .. })
        | Some(qrn_core::Error::DegenerateProtocol(_))
        | Some(qrn_core::Error::DegenerateEncoding(_)) => 3,
        Some(qrn_core::Error::Timeout(_)) => 4,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
