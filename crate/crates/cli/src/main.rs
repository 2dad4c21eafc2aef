//! `vgt`: evolve channel assignments, train closed-loop policies, replay and
//! check designs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{load_truss, CliError, Overrides, ResolvedConfig};

#[derive(Parser)]
#[command(name = "vgt", version, about = "Variable geometry truss co-design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; beats VGT_WORKERS and the config.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-objective GA over channel assignments and control schedules.
    RunGa {
        #[command(flatten)]
        run: RunArgs,
    },
    /// PPO on top of a genome's channel assignment.
    RunRl {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        genome: Option<PathBuf>,
        #[arg(long)]
        objective: Option<String>,
    },
    /// Replays a genome (or a policy on its assignment) and prints scores.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        genome: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        objective: Option<String>,
    },
    /// Runs the assignment invariant suite on a genome.
    Validate {
        #[arg(long, required_unless_present = "config", conflicts_with = "config")]
        truss: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        genome: PathBuf,
    },
}

fn resolve(run: &RunArgs) -> Result<ResolvedConfig, CliError> {
    ResolvedConfig::load(
        &run.config,
        &Overrides {
            seed: run.seed,
            workers: run.workers,
            out: run.out.clone(),
        },
    )
}

fn in_pool<T>(cfg: &ResolvedConfig, f: impl FnOnce() -> T + Send) -> Result<T, CliError>
where
    T: Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Run(e.to_string()))?;
    Ok(pool.install(f))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::RunGa { run } => {
            let cfg = resolve(&run)?;
            in_pool(&cfg, || commands::run_ga(&cfg))?
        }
        Command::RunRl {
            run,
            genome,
            objective,
        } => {
            let cfg = resolve(&run)?;
            in_pool(&cfg, || {
                commands::run_rl(&cfg, genome.as_deref(), objective.as_deref())
            })?
        }
        Command::Simulate {
            run,
            genome,
            policy,
            objective,
        } => {
            let cfg = resolve(&run)?;
            commands::simulate(&cfg, &genome, policy.as_deref(), objective.as_deref())
        }
        Command::Validate {
            truss,
            config,
            genome,
        } => {
            let truss = match (truss, config) {
                (Some(t), _) => load_truss(&t)?,
                (None, Some(c)) => ResolvedConfig::load(&c, &Overrides::default())?.truss,
                (None, None) => unreachable!("clap requires one of them"),
            };
            commands::validate(&truss, &genome)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
