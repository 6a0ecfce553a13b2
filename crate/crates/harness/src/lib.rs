//! Scripted scenarios for the pharmafind broker.
//!
//! A [`Scenario`] declares a world (medicines, pharmacies with stock,
//! patients) and a time-ordered script of actions. [`seed`] writes the world
//! into an empty data directory; [`run`] drives a virtual-clock server through
//! the script over HTTP, checks every expectation plus log-replay consistency
//! after each step, and returns a deterministic transcript.

pub mod embedded;
pub mod runner;
pub mod scenario;

use std::path::Path;
use std::sync::Arc;

use pharmafind_core::clock::VirtualClock;
use pharmafind_core::{Broker, BrokerError};
use thiserror::Error;

pub use embedded::{EmbeddedError, EmbeddedServer};
pub use runner::{run, RunError, RunOutcome};
pub use scenario::{Scenario, ScenarioError};

#[derive(Debug, Error)]
pub enum SeedError {
    #[error("{0}: data directory is not empty; seeding only targets a fresh directory")]
    NotEmpty(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Broker(#[from] BrokerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedReport {
    pub pharmacies: usize,
    pub medicines: usize,
    pub users: usize,
}

/// Loads the scenario's world into `dir`, which must be missing or empty.
pub fn seed(scenario: &Scenario, dir: &Path) -> Result<SeedReport, SeedError> {
    let io = |source| SeedError::Io {
        path: dir.display().to_string(),
        source,
    };
    if dir.exists() {
        if std::fs::read_dir(dir).map_err(io)?.next().is_some() {
            return Err(SeedError::NotEmpty(dir.display().to_string()));
        }
    } else {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let clock = Arc::new(VirtualClock::new(VirtualClock::epoch()));
    let broker = Broker::open(dir, scenario.world.seed(), clock)?;
    Ok(SeedReport {
        pharmacies: broker.registry().snapshot().len(),
        medicines: broker.catalog().len(),
        users: broker.tokens().len(),
    })
}

/// Runs `scenario` against an embedded server over a fresh data directory.
pub fn run_embedded(scenario: &Scenario) -> Result<RunOutcome, HarnessError> {
    let server = EmbeddedServer::start(&scenario.world)?;
    Ok(run(scenario, server.url())?)
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Seed(#[from] SeedError),
    #[error(transparent)]
    Embedded(#[from] EmbeddedError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
}
