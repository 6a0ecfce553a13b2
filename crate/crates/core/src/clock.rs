//! Injected time sources. Nothing in the engine reads the wall clock directly.

use std::sync::Mutex;

use chrono::{DateTime, Duration, TimeZone, Utc};

use crate::domain::Timestamp;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Utc::now()
    }
}

/// Manually advanced clock for deterministic tests and scenario runs.
#[derive(Debug)]
pub struct VirtualClock {
    now: Mutex<Timestamp>,
}

impl VirtualClock {
    /// Fixed starting instant so transcripts are reproducible.
    pub fn epoch() -> Timestamp {
        Utc.with_ymd_and_hms(2024, 1, 1, 9, 0, 0).unwrap()
    }

    pub fn new(start: Timestamp) -> Self {
        Self {
            now: Mutex::new(start),
        }
    }

    pub fn advance(&self, by: Duration) -> Timestamp {
        let mut now = self.now.lock().expect("clock lock poisoned");
        *now += by;
        *now
    }

    pub fn set(&self, to: DateTime<Utc>) {
        *self.now.lock().expect("clock lock poisoned") = to;
    }
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self::new(Self::epoch())
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        *self.now.lock().expect("clock lock poisoned")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_advances_only_when_told() {
        let c = VirtualClock::default();
        let t0 = c.now();
        assert_eq!(c.now(), t0);
        assert_eq!(c.advance(Duration::minutes(10)), t0 + Duration::minutes(10));
        assert_eq!(c.now() - t0, Duration::seconds(600));
    }
}
