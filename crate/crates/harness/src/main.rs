use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pharmafind_harness::{run, run_embedded, seed, HarnessError, Scenario};

#[derive(Debug, Parser)]
#[command(name = "harness", version, about = "Run scripted pharmafind scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a scenario's world into a fresh data directory.
    Seed {
        file: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Execute a scenario and report pass/fail per assertion.
    Run {
        file: PathBuf,
        /// Base URL of a server started with --virtual-clock over a directory
        /// seeded from this scenario. Without it an in-process server is used.
        #[arg(long)]
        server: Option<String>,
        /// Write the transcript here instead of standard output.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> Result<ExitCode, HarnessError> {
    match command {
        Command::Seed { file, data_dir } => {
            let scenario = Scenario::load(&file)?;
            let r = seed(&scenario, &data_dir)?;
            println!(
                "seeded {}: {} pharmacies, {} medicines, {} users",
                data_dir.display(),
                r.pharmacies,
                r.medicines,
                r.users
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            file,
            server,
            transcript,
        } => {
            let scenario = Scenario::load(&file)?;
            let outcome = match server {
                Some(url) => run(&scenario, &url)?,
                None => run_embedded(&scenario)?,
            };
            match transcript {
                Some(path) => {
                    std::fs::write(&path, &outcome.transcript).map_err(|source| HarnessError::Write {
                        path: path.display().to_string(),
                        source,
                    })?;
                    for f in &outcome.failures {
                        println!("FAIL {f}");
                    }
                }
                None => print!("{}", outcome.transcript),
            }
            let verdict = if outcome.passed() { "PASS" } else { "FAIL" };
            eprintln!(
                "{verdict} {}: {} assertions, {} failed",
                scenario.name,
                outcome.assertions,
                outcome.failures.len()
            );
            Ok(if outcome.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
