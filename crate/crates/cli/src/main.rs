//! `kbse` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Log verbosity comes from `KBSE_LOG_LEVEL` (error, warn, info, debug).

mod commands;
mod interrupt;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "kbse", version, about = "Kernel-based safe exploration: train, evaluate and certify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy while learning and enforcing a barrier certificate.
    Train(TrainArgs),
    /// Run a saved policy, shielded by a saved barrier.
    Eval(EvalArgs),
    /// Print the certificate carried by a barrier file.
    Certify(CertifyArgs),
    /// Describe a policy, barrier, summary or metrics file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "kbse-out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    env: Option<String>,
    /// Training horizon in environment steps.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Policy checkpoint written by `train`.
    #[arg(long)]
    policy: PathBuf,
    /// Barrier written by `train`; without it episodes run unshielded.
    #[arg(long)]
    barrier: Option<PathBuf>,
    /// Run configuration; defaults to `config.toml` next to the policy.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    env: Option<String>,
    /// Directory to write `eval.json` into.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CertifyArgs {
    /// Barrier JSON file.
    #[arg(long)]
    barrier: PathBuf,
    /// Safety horizon T to certify instead of the stored one.
    #[arg(long)]
    horizon: Option<usize>,
    /// Environment name, used to print published reference values.
    #[arg(long)]
    env: Option<String>,
    /// Directory to write `certificate.json` into.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// File to describe.
    path: PathBuf,
}

fn init_logging() {
    let env = env_logger::Env::default().filter_or("KBSE_LOG_LEVEL", "warn");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a.config, &a.out, a.seed, a.env.as_deref(), a.horizon),
        Command::Eval(a) => commands::eval(&commands::EvalRequest {
            policy: a.policy,
            barrier: a.barrier,
            config: a.config,
            episodes: a.episodes,
            seed: a.seed,
            env: a.env,
            out: a.out,
        }),
        Command::Certify(a) => commands::certify(&a.barrier, a.horizon, a.env.as_deref(), a.out.as_deref()),
        Command::Inspect(a) => commands::inspect(&a.path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
