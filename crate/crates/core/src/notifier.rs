//! Per-user notification inboxes with live fan-out.
//!
//! The inbox is exactly-once: each event has a dedup key and a second emit of
//! the same key returns the stored notification. Live delivery goes through a
//! broadcast channel and is at-least-once; a subscriber that lags re-reads the
//! inbox from its last seen id.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::domain::{PharmacyId, RequestId, Timestamp, UserId, Verdict};
use crate::engine::RequestState;

pub type NotificationId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotificationKind {
    PharmacyResponse,
    RequestStateChange,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum NotificationEvent {
    PharmacyResponse {
        request_id: RequestId,
        pharmacy_id: PharmacyId,
        verdict: Verdict,
    },
    StateChange {
        request_id: RequestId,
        from: RequestState,
        to: RequestState,
    },
}

impl NotificationEvent {
    pub fn request_id(&self) -> &RequestId {
        match self {
            Self::PharmacyResponse { request_id, .. } | Self::StateChange { request_id, .. } => {
                request_id
            }
        }
    }

    fn kind(&self) -> NotificationKind {
        match self {
            Self::PharmacyResponse { .. } => NotificationKind::PharmacyResponse,
            Self::StateChange { .. } => NotificationKind::RequestStateChange,
        }
    }

    /// One inbox entry per (request, pharmacy) response and per state reached.
    fn dedup_key(&self) -> DedupKey {
        match self {
            Self::PharmacyResponse {
                request_id,
                pharmacy_id,
                ..
            } => DedupKey::Response(request_id.clone(), pharmacy_id.clone()),
            Self::StateChange { request_id, to, .. } => DedupKey::State(request_id.clone(), *to),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum DedupKey {
    Response(RequestId, PharmacyId),
    State(RequestId, RequestState),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotificationPayload {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pharmacy_id: Option<PharmacyId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from_state: Option<RequestState>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_state: Option<RequestState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub id: NotificationId,
    pub user_id: UserId,
    pub kind: NotificationKind,
    pub request_id: RequestId,
    pub payload: NotificationPayload,
    pub created_at: Timestamp,
    pub read: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum NotifierError {
    #[error("notification {0} not found")]
    NotFound(NotificationId),
}

#[derive(Debug, Default)]
struct Inner {
    next_id: NotificationId,
    seen: HashMap<(UserId, DedupKey), NotificationId>,
    by_id: BTreeMap<NotificationId, Notification>,
}

#[derive(Debug)]
pub struct Notifier {
    inner: Mutex<Inner>,
    live: broadcast::Sender<Notification>,
}

impl Default for Notifier {
    fn default() -> Self {
        Self::new(1024)
    }
}

impl Notifier {
    pub fn new(live_capacity: usize) -> Self {
        let (live, _) = broadcast::channel(live_capacity.max(1));
        Self {
            inner: Mutex::new(Inner::default()),
            live,
        }
    }

    /// Stores the notification for `owner` unless this event was already
    /// stored. Returns the notification and whether it was newly created.
    pub fn emit(&self, event: NotificationEvent, owner: &UserId, at: Timestamp) -> (Notification, bool) {
        let key = (owner.clone(), event.dedup_key());
        let mut inner = self.inner.lock().expect("notifier lock poisoned");
        if let Some(id) = inner.seen.get(&key) {
            return (inner.by_id[id].clone(), false);
        }
        inner.next_id += 1;
        let id = inner.next_id;
        let payload = match &event {
            NotificationEvent::PharmacyResponse {
                pharmacy_id,
                verdict,
                ..
            } => NotificationPayload {
                pharmacy_id: Some(pharmacy_id.clone()),
                verdict: Some(*verdict),
                from_state: None,
                new_state: None,
            },
            NotificationEvent::StateChange { from, to, .. } => NotificationPayload {
                pharmacy_id: None,
                verdict: None,
                from_state: Some(*from),
                new_state: Some(*to),
            },
        };
        let n = Notification {
            id,
            user_id: owner.clone(),
            kind: event.kind(),
            request_id: event.request_id().clone(),
            payload,
            created_at: at,
            read: false,
        };
        inner.seen.insert(key, id);
        inner.by_id.insert(id, n.clone());
        // Published under the lock so live order matches id order.
        let _ = self.live.send(n.clone());
        (n, true)
    }

    /// Newest first; equal timestamps order by descending id.
    pub fn list(&self, user: &UserId, unread_only: bool) -> Vec<Notification> {
        let inner = self.inner.lock().expect("notifier lock poisoned");
        let mut out: Vec<Notification> = inner
            .by_id
            .values()
            .filter(|n| &n.user_id == user && !(unread_only && n.read))
            .cloned()
            .collect();
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then(b.id.cmp(&a.id)));
        out
    }

    /// Notifications for `user` with id greater than `after`, oldest first.
    pub fn since(&self, user: &UserId, after: NotificationId) -> Vec<Notification> {
        let inner = self.inner.lock().expect("notifier lock poisoned");
        inner
            .by_id
            .range(after + 1..)
            .map(|(_, n)| n)
            .filter(|n| &n.user_id == user)
            .cloned()
            .collect()
    }

    /// Marks the given notifications read and returns how many changed. Fails
    /// without changing anything if any id is unknown or owned by someone else.
    pub fn mark_read(&self, user: &UserId, ids: &[NotificationId]) -> Result<usize, NotifierError> {
        let mut inner = self.inner.lock().expect("notifier lock poisoned");
        for id in ids {
            match inner.by_id.get(id) {
                Some(n) if &n.user_id == user => {}
                _ => return Err(NotifierError::NotFound(*id)),
            }
        }
        let mut updated = 0;
        for id in ids {
            let n = inner.by_id.get_mut(id).expect("checked above");
            if !n.read {
                n.read = true;
                updated += 1;
            }
        }
        Ok(updated)
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Notification> {
        self.live.subscribe()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("notifier lock poisoned").by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
