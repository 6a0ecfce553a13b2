//! HTTP/JSON surface of the pharmafind broker.
//!
//! [`router`] builds the axum application over a shared [`Broker`]. In
//! virtual-clock mode the `/admin` endpoints are mounted so tests can move
//! time forward; otherwise [`spawn_ticker`] drives round timeouts from the
//! wall clock.

pub mod api;
pub mod error;
pub mod extract;
pub mod views;
pub mod world;

use std::sync::Arc;
use std::time::Duration;

use pharmafind_core::clock::{Clock, VirtualClock};
use pharmafind_core::domain::Timestamp;
use pharmafind_core::{Broker, BrokerError, RequestId};

pub use api::router;
pub use error::ApiError;

pub const DEFAULT_HEARTBEAT: Duration = Duration::from_secs(15);

#[derive(Clone)]
pub struct AppState {
    pub broker: Arc<Broker>,
    /// Present in virtual-clock mode; enables the admin endpoints.
    pub virtual_clock: Option<Arc<VirtualClock>>,
    /// Interval between keep-alive comments on the notification stream.
    pub heartbeat: Duration,
}

impl AppState {
    pub fn new(broker: Arc<Broker>, virtual_clock: Option<Arc<VirtualClock>>) -> Self {
        Self {
            broker,
            virtual_clock,
            heartbeat: DEFAULT_HEARTBEAT,
        }
    }
}

/// Moves the virtual clock forward by `by`, stopping at every round deadline on
/// the way so each expansion happens at the instant it is due.
pub fn advance_virtual_clock(
    broker: &Broker,
    clock: &VirtualClock,
    by: chrono::Duration,
) -> Result<(Timestamp, Vec<RequestId>), BrokerError> {
    let target = clock.now().checked_add_signed(by).unwrap_or(Timestamp::MAX_UTC);
    let mut changed: Vec<RequestId> = Vec::new();
    while let Some(due) = broker.next_deadline().filter(|d| *d <= target) {
        if due > clock.now() {
            clock.set(due);
        }
        for id in broker.tick_all()? {
            if !changed.contains(&id) {
                changed.push(id);
            }
        }
    }
    clock.set(target);
    Ok((target, changed))
}

/// Runs the timeout rule every `period` on a blocking thread.
pub fn spawn_ticker(broker: Arc<Broker>, period: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        loop {
            interval.tick().await;
            let b = broker.clone();
            match tokio::task::spawn_blocking(move || b.tick_all()).await {
                Ok(Ok(changed)) if !changed.is_empty() => {
                    tracing::info!(?changed, "round timeouts applied");
                }
                Ok(Ok(_)) => {}
                Ok(Err(e)) => tracing::error!(error = %e, "tick failed"),
                Err(e) => tracing::error!(error = %e, "tick task panicked"),
            }
        }
    })
}
