use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use pharmafind_core::clock::{Clock, SystemClock, VirtualClock};
use pharmafind_core::stats::{
    analyze, parse_contingency_fixture, parse_count_fixture, render_chi_square_report,
    render_tabulation_report,
};
use pharmafind_core::store::{format_event, Store};
use pharmafind_core::{Broker, RequestId};
use pharmafind_server::world::SeedFiles;
use pharmafind_server::{router, spawn_ticker, AppState};

#[derive(Debug, Parser)]
#[command(name = "pharmafind", version, about = "Medicine-availability broker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Pearson chi-square report over a cross-tabulation fixture.
    Stats {
        fixture: PathBuf,
        /// Exit non-zero if a computed pair differs from the reported one.
        #[arg(long)]
        check: bool,
    },
    /// Frequency tables over a count fixture.
    Tabulate {
        fixture: PathBuf,
        /// Exit non-zero if a computed percentage differs from the reported one.
        #[arg(long)]
        check: bool,
    },
    /// Print the event trace of one request (or every request) in a data directory.
    LogDump {
        #[arg(long)]
        data_dir: PathBuf,
        request_id: Option<String>,
    },
}

#[derive(Debug, clap::Args)]
struct ServeArgs {
    #[arg(long, env = "PHARMAFIND_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    #[arg(long, env = "PHARMAFIND_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Medicine file, used when the data directory is empty.
    #[arg(long, env = "PHARMAFIND_CATALOG")]
    catalog: Option<PathBuf>,
    /// Pharmacy seed file, used when the data directory is empty.
    #[arg(long, env = "PHARMAFIND_PHARMACIES")]
    pharmacies: Option<PathBuf>,
    /// Token table, used when the data directory is empty.
    #[arg(long, env = "PHARMAFIND_TOKENS")]
    tokens: Option<PathBuf>,
    /// Freeze time and mount the /admin endpoints.
    #[arg(long, env = "PHARMAFIND_VIRTUAL_CLOCK")]
    virtual_clock: bool,
    /// Seconds between keep-alive comments on the notification stream.
    #[arg(long, env = "PHARMAFIND_HEARTBEAT_SECS", default_value_t = 15)]
    heartbeat_secs: u64,
    /// Milliseconds between timeout checks when running on the wall clock.
    #[arg(long, env = "PHARMAFIND_TICK_MS", default_value_t = 1000)]
    tick_ms: u64,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve(args) => serve(args),
        Command::Stats { fixture, check } => stats(&fixture, check),
        Command::Tabulate { fixture, check } => tabulate(&fixture, check),
        Command::LogDump {
            data_dir,
            request_id,
        } => log_dump(&data_dir, request_id),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;

fn read(path: &Path) -> Result<String, Box<dyn std::error::Error>> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn stats(fixture: &Path, check: bool) -> CliResult {
    let fx = parse_contingency_fixture(&read(fixture)?)?;
    print!("{}", render_chi_square_report(&fx)?);
    let differs = analyze(&fx)?
        .iter()
        .any(|r| r.matches_reported() == Some(false));
    Ok(if check && differs {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn tabulate(fixture: &Path, check: bool) -> CliResult {
    let fx = parse_count_fixture(&read(fixture)?)?;
    let report = render_tabulation_report(&fx)?;
    print!("{report}");
    Ok(if check && report.contains("[DIFFERS") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn log_dump(data_dir: &Path, request_id: Option<String>) -> CliResult {
    if !Store::file_path(data_dir).exists() {
        return Err(format!("{}: no store in this directory", data_dir.display()).into());
    }
    let store = Store::open(data_dir)?;
    let ids: Vec<RequestId> = match request_id {
        Some(id) => vec![RequestId(id)],
        None => store.request_ids().to_vec(),
    };
    for id in ids {
        let events = store.events(&id);
        if events.is_empty() {
            return Err(format!("request {id} not found").into());
        }
        for ev in events {
            println!("{}", format_event(ev));
        }
        let req = store.replay(&id)?;
        println!("=> {id}: {} (round {}, radius {} km)", req.state, req.round, req.current_radius_km);
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(args: ServeArgs) -> CliResult {
    let seed = SeedFiles {
        catalog: args.catalog,
        pharmacies: args.pharmacies,
        tokens: args.tokens,
    }
    .load()?;
    let virtual_clock = args.virtual_clock.then(|| Arc::new(VirtualClock::default()));
    let clock: Arc<dyn Clock> = match &virtual_clock {
        Some(v) => v.clone(),
        None => Arc::new(SystemClock),
    };
    let broker = Arc::new(Broker::open(&args.data_dir, seed, clock)?);
    if let Some(v) = &virtual_clock {
        // resume virtual time where the log left off
        if let Some(last) = broker.events_since(0).last() {
            if last.at > v.now() {
                v.set(last.at);
            }
        }
    }
    let mut state = AppState::new(broker.clone(), virtual_clock.clone());
    state.heartbeat = Duration::from_secs(args.heartbeat_secs.max(1));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        if virtual_clock.is_none() {
            spawn_ticker(broker.clone(), Duration::from_millis(args.tick_ms.max(10)));
        }
        let listener = tokio::net::TcpListener::bind(args.listen).await?;
        tracing::info!(
            addr = %listener.local_addr()?,
            pharmacies = broker.registry().snapshot().len(),
            medicines = broker.catalog().len(),
            tokens = broker.tokens().len(),
            virtual_clock = state.virtual_clock.is_some(),
            "listening"
        );
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, Box<dyn std::error::Error>>(ExitCode::SUCCESS)
    })
}
