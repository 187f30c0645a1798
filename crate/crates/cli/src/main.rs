use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use isaclab::harness::{run_experiment, run_oracle, ProblemInstance, RunOptions, RunStatus, Scenario};
use isaclab::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_SCHEMA: u8 = 3;

#[derive(Parser)]
#[command(name = "isaclab", version, about = "OFDM sensing/communication experiment workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline described by a scenario file and write CSV artifacts.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the Monte-Carlo trial count.
        #[arg(long)]
        trials: Option<usize>,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Solve a per-subcarrier instance exhaustively and with the bilevel heuristic.
    Oracle {
        instance: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Schema(_) | Error::Json(_)) => EXIT_SCHEMA,
        Some(Error::Infeasible(_) | Error::InfeasibleSubcarrier(_)) => EXIT_INFEASIBLE,
        _ => EXIT_FAILURE,
    }
}

fn set_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(k) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(k.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Run { scenario, out, seed, trials, threads } => {
            set_threads(threads)?;
            let manifest = run_experiment(&scenario, &out, &RunOptions { seed, trials })?;
            for f in &manifest.files {
                println!("{}\t{} rows", out.join(&f.file).display(), f.rows);
            }
            if manifest.status == RunStatus::Infeasible {
                for p in &manifest.infeasible_points {
                    eprintln!("infeasible: {p}");
                }
                return Ok(EXIT_INFEASIBLE);
            }
            Ok(0)
        }
        Command::Oracle { instance, threads } => {
            set_threads(threads)?;
            let inst = ProblemInstance::load(&instance)?;
            let report = run_oracle(&inst)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(0)
        }
        Command::Validate { scenario } => {
            let s = Scenario::load(&scenario)?;
            println!(
                "ok: {:?} with {} sweep points, N = {}, M = {}, seed {}",
                s.pipeline,
                s.sweep.grid.len(),
                s.n(),
                s.ofdm.n_symbols,
                s.seed
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
