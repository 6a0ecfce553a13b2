//! An in-process virtual-clock server on a loopback port, for runs without
//! `--server`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use pharmafind_core::clock::{Clock, VirtualClock};
use pharmafind_core::{Broker, BrokerError};
use pharmafind_server::{router, AppState};
use thiserror::Error;
use tokio::sync::oneshot;

use crate::scenario::World;

#[derive(Debug, Error)]
pub enum EmbeddedError {
    #[error("embedded server: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedded server: {0}")]
    Broker(#[from] BrokerError),
}

pub struct EmbeddedServer {
    url: String,
    shutdown: Option<oneshot::Sender<()>>,
    runtime: Option<tokio::runtime::Runtime>,
    data_dir: PathBuf,
    temp: Option<tempfile::TempDir>,
}

impl EmbeddedServer {
    /// Seeds a fresh temporary data directory with `world` and serves it. The
    /// virtual clock starts at [`VirtualClock::epoch`].
    pub fn start(world: &World) -> Result<Self, EmbeddedError> {
        let temp = tempfile::tempdir()?;
        let mut server = Self::serve(temp.path(), world)?;
        server.temp = Some(temp);
        Ok(server)
    }

    /// Serves a data directory that already holds a world, such as one
    /// written by [`crate::seed`]. Virtual time resumes after the last logged
    /// event.
    pub fn open(data_dir: &Path) -> Result<Self, EmbeddedError> {
        Self::serve(data_dir, &World::default())
    }

    fn serve(data_dir: &Path, world: &World) -> Result<Self, EmbeddedError> {
        let clock = Arc::new(VirtualClock::new(VirtualClock::epoch()));
        let broker = Arc::new(Broker::open(data_dir, world.seed(), clock.clone())?);
        if let Some(last) = broker.events_since(0).last() {
            if last.at > clock.now() {
                clock.set(last.at);
            }
        }
        let app = router(AppState::new(broker, Some(clock)));
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
        let url = format!("http://{}", listener.local_addr()?);
        let (tx, rx) = oneshot::channel::<()>();
        runtime.spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(Self {
            url,
            shutdown: Some(tx),
            runtime: Some(runtime),
            data_dir: data_dir.to_owned(),
            temp: None,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }
}

impl Drop for EmbeddedServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}
