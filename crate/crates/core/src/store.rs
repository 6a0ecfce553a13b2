//! Single-file embedded store.
//!
//! The data directory holds one file, `store.jsonl`. Each line is a JSON
//! record, either an entity snapshot (`{"record":"entities","kind":...}`, the
//! last snapshot of a kind wins) or a request event
//! (`{"record":"event","sequence":...}`). Events are validated against the
//! request state machine before they are written and every write is synced
//! before it is acknowledged.
//!
//! A torn final line (no trailing newline, or unparseable) is dropped on open.
//! Any other undecodable line is corruption.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainError, Medicine, Pharmacy, Prescription, RequestId, Timestamp};
use crate::engine::{AvailabilityRequest, RequestEvent, RequestEventKind, TraceError};

pub const STORE_FILE: &str = "store.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("invalid trace for request {request_id}: {source}")]
    InvalidTrace {
        request_id: RequestId,
        source: TraceError,
    },
    #[error("event {key} of request {request_id} was already stored with a different payload")]
    DedupConflict { request_id: RequestId, key: String },
    #[error("request {0} not found")]
    NotFound(RequestId),
    #[error("unknown entity kind {0:?}")]
    UnknownKind(String),
    #[error("invalid {kind} record: {message}")]
    Validation { kind: EntityKind, message: String },
    #[error("encoding error: {0}")]
    Encode(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Pharmacies,
    Medicines,
    Users,
    Prescriptions,
}

impl EntityKind {
    pub const ALL: [EntityKind; 4] = [
        EntityKind::Pharmacies,
        EntityKind::Medicines,
        EntityKind::Users,
        EntityKind::Prescriptions,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pharmacies => "pharmacies",
            Self::Medicines => "medicines",
            Self::Users => "users",
            Self::Prescriptions => "prescriptions",
        }
    }
}

impl std::fmt::Display for EntityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityKind {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| StoreError::UnknownKind(s.to_owned()))
    }
}

/// A record type persisted as an entity snapshot.
pub trait Entity: Serialize + DeserializeOwned {
    const KIND: EntityKind;

    fn validate(&self) -> Result<(), DomainError> {
        Ok(())
    }
}

impl Entity for Pharmacy {
    const KIND: EntityKind = EntityKind::Pharmacies;
}

impl Entity for Medicine {
    const KIND: EntityKind = EntityKind::Medicines;

    fn validate(&self) -> Result<(), DomainError> {
        Medicine::validate(self)
    }
}

impl Entity for Prescription {
    const KIND: EntityKind = EntityKind::Prescriptions;

    fn validate(&self) -> Result<(), DomainError> {
        Prescription::validate(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum StoreRecord {
    Entities {
        kind: EntityKind,
        records: Vec<serde_json::Value>,
    },
    Event(RequestEvent),
}

/// Result of decoding a log file.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedLog {
    pub records: Vec<StoreRecord>,
    /// Byte length of the intact prefix; anything after it is a torn tail.
    pub valid_len: usize,
}

/// Decodes log bytes, dropping a torn final line.
pub fn decode_log(bytes: &[u8]) -> Result<DecodedLog, StoreError> {
    let mut records = Vec::new();
    let mut offset = 0;
    let mut line_no = 0;
    while offset < bytes.len() {
        line_no += 1;
        let rest = &bytes[offset..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            // no newline: the write never completed
            break;
        };
        let line = &rest[..nl];
        let next = offset + nl + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            offset = next;
            continue;
        }
        match serde_json::from_slice::<StoreRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) if next == bytes.len() => break,
            Err(e) => {
                return Err(StoreError::Corrupt {
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
        offset = next;
    }
    Ok(DecodedLog {
        records,
        valid_len: offset,
    })
}

#[derive(Debug, Default)]
pub struct Store {
    path: Option<PathBuf>,
    file: Option<File>,
    next_sequence: u64,
    entities: HashMap<EntityKind, Vec<serde_json::Value>>,
    events: HashMap<RequestId, Vec<RequestEvent>>,
    /// Derived per-request state; the log is the truth.
    snapshots: HashMap<RequestId, AvailabilityRequest>,
    dedup: HashMap<(RequestId, String), u64>,
    order: Vec<RequestId>,
}

impl Store {
    /// A store that keeps everything in memory.
    pub fn in_memory() -> Self {
        Self {
            next_sequence: 1,
            ..Self::default()
        }
    }

    pub fn file_path(dir: &Path) -> PathBuf {
        dir.join(STORE_FILE)
    }

    /// Opens (or creates) the store in `dir`, recovering from a torn tail.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StoreError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let path = Self::file_path(dir);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io(&path)(e)),
        };
        let decoded = decode_log(&bytes)?;
        let mut store = Self::in_memory();
        for (i, rec) in decoded.records.into_iter().enumerate() {
            store.ingest(rec).map_err(|e| StoreError::Corrupt {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io(&path))?;
        if decoded.valid_len < bytes.len() {
            file.set_len(decoded.valid_len as u64).map_err(io(&path))?;
            file.sync_all().map_err(io(&path))?;
        }
        store.file = Some(file);
        store.path = Some(path);
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// True when nothing has been stored yet.
    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.events.is_empty()
    }

    fn ingest(&mut self, rec: StoreRecord) -> Result<(), StoreError> {
        match rec {
            StoreRecord::Entities { kind, records } => {
                self.entities.insert(kind, records);
            }
            StoreRecord::Event(ev) => {
                if ev.sequence < self.next_sequence {
                    return Err(StoreError::Corrupt {
                        line: 0,
                        message: format!("sequence {} is not increasing", ev.sequence),
                    });
                }
                let next = self.validate(&ev.request_id, ev.at, &ev.kind)?;
                self.next_sequence = ev.sequence + 1;
                self.commit(ev, next);
            }
        }
        Ok(())
    }

    fn validate(
        &self,
        request_id: &RequestId,
        at: Timestamp,
        kind: &RequestEventKind,
    ) -> Result<AvailabilityRequest, StoreError> {
        let trace_err = |source| StoreError::InvalidTrace {
            request_id: request_id.clone(),
            source,
        };
        match self.snapshots.get(request_id) {
            None => {
                let probe = RequestEvent {
                    sequence: 0,
                    request_id: request_id.clone(),
                    at,
                    kind: kind.clone(),
                };
                let req = AvailabilityRequest::replay([&probe]).map_err(trace_err)?;
                Ok(req.expect("one event yields a request"))
            }
            Some(current) => {
                let mut next = current.clone();
                next.apply(at, kind).map_err(trace_err)?;
                Ok(next)
            }
        }
    }

    fn commit(&mut self, ev: RequestEvent, next: AvailabilityRequest) {
        let id = ev.request_id.clone();
        self.dedup
            .insert((id.clone(), ev.kind.dedup_key()), ev.sequence);
        if !self.events.contains_key(&id) {
            self.order.push(id.clone());
        }
        self.events.entry(id.clone()).or_default().push(ev);
        self.snapshots.insert(id, next);
    }

    fn write_line(&mut self, rec: &StoreRecord) -> Result<(), StoreError> {
        let Some(file) = self.file.as_mut() else {
            return Ok(());
        };
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        let path = self.path.clone().unwrap_or_default();
        file.write_all(&line)
            .and_then(|_| file.sync_data())
            .map_err(|source| StoreError::Io { path, source })
    }

    /// Appends an event after checking it extends the request's trace.
    /// Re-appending an already stored event returns its original sequence.
    pub fn append(
        &mut self,
        request_id: &RequestId,
        at: Timestamp,
        kind: RequestEventKind,
    ) -> Result<u64, StoreError> {
        let key = kind.dedup_key();
        if let Some(&seq) = self.dedup.get(&(request_id.clone(), key.clone())) {
            let stored = self.events[request_id]
                .iter()
                .find(|e| e.sequence == seq)
                .expect("dedup index points at a stored event");
            if stored.kind == kind {
                return Ok(seq);
            }
            return Err(StoreError::DedupConflict {
                request_id: request_id.clone(),
                key,
            });
        }
        let next = self.validate(request_id, at, &kind)?;
        let ev = RequestEvent {
            sequence: self.next_sequence,
            request_id: request_id.clone(),
            at,
            kind,
        };
        self.write_line(&StoreRecord::Event(ev.clone()))?;
        self.next_sequence += 1;
        let seq = ev.sequence;
        self.commit(ev, next);
        Ok(seq)
    }

    pub fn append_all(
        &mut self,
        request_id: &RequestId,
        at: Timestamp,
        kinds: impl IntoIterator<Item = RequestEventKind>,
    ) -> Result<Vec<u64>, StoreError> {
        kinds
            .into_iter()
            .map(|k| self.append(request_id, at, k))
            .collect()
    }

    pub fn events(&self, request_id: &RequestId) -> &[RequestEvent] {
        self.events.get(request_id).map_or(&[], Vec::as_slice)
    }

    /// All events with sequence greater than `after`, in log order.
    pub fn events_since(&self, after: u64) -> Vec<RequestEvent> {
        let mut out: Vec<RequestEvent> = self
            .events
            .values()
            .flatten()
            .filter(|e| e.sequence > after)
            .cloned()
            .collect();
        out.sort_by_key(|e| e.sequence);
        out
    }

    pub fn last_sequence(&self) -> u64 {
        self.next_sequence - 1
    }

    /// Request ids in order of first appearance.
    pub fn request_ids(&self) -> &[RequestId] {
        &self.order
    }

    /// Folds the request's events from scratch.
    pub fn replay(&self, request_id: &RequestId) -> Result<AvailabilityRequest, StoreError> {
        AvailabilityRequest::replay(self.events(request_id))
            .map_err(|source| StoreError::InvalidTrace {
                request_id: request_id.clone(),
                source,
            })?
            .ok_or_else(|| StoreError::NotFound(request_id.clone()))
    }

    /// Cached state derived while appending.
    pub fn snapshot(&self, request_id: &RequestId) -> Option<&AvailabilityRequest> {
        self.snapshots.get(request_id)
    }

    pub fn save_entities<T: Entity>(&mut self, records: &[T]) -> Result<usize, StoreError> {
        let mut values = Vec::with_capacity(records.len());
        for r in records {
            r.validate().map_err(|e| StoreError::Validation {
                kind: T::KIND,
                message: e.to_string(),
            })?;
            values.push(serde_json::to_value(r)?);
        }
        self.write_line(&StoreRecord::Entities {
            kind: T::KIND,
            records: values.clone(),
        })?;
        let n = values.len();
        self.entities.insert(T::KIND, values);
        Ok(n)
    }

    pub fn load_entities<T: Entity>(&self) -> Result<Vec<T>, StoreError> {
        let values = self.entities.get(&T::KIND).map_or(&[][..], Vec::as_slice);
        values
            .iter()
            .map(|v| {
                let rec: T = serde_json::from_value(v.clone()).map_err(|e| StoreError::Validation {
                    kind: T::KIND,
                    message: e.to_string(),
                })?;
                rec.validate().map_err(|e| StoreError::Validation {
                    kind: T::KIND,
                    message: e.to_string(),
                })?;
                Ok(rec)
            })
            .collect()
    }

    /// Untyped access by kind name, as used by tooling.
    pub fn load_raw(&self, kind: &str) -> Result<Vec<serde_json::Value>, StoreError> {
        let kind: EntityKind = kind.parse()?;
        Ok(self.entities.get(&kind).cloned().unwrap_or_default())
    }

    pub fn entity_count(&self, kind: EntityKind) -> usize {
        self.entities.get(&kind).map_or(0, Vec::len)
    }
}

/// One human-readable line per event.
pub fn format_event(ev: &RequestEvent) -> String {
    let mut s = format!(
        "#{:<4} {} {} {}",
        ev.sequence,
        ev.at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        ev.request_id,
        ev.kind.name()
    );
    match &ev.kind {
        RequestEventKind::Opened {
            prescription_id,
            owner,
            origin,
            medicine_ids,
            config,
        } => {
            let meds: Vec<&str> = medicine_ids.iter().map(|m| m.as_str()).collect();
            let _ = write!(
                s,
                " prescription={prescription_id} owner={owner} origin=({:.5},{:.5}) medicines=[{}] radius={}km factor={} max={}km timeout={}s",
                origin.lat(),
                origin.lon(),
                meds.join(","),
                config.initial_radius_km,
                config.expansion_factor,
                config.max_radius_km,
                config.round_timeout_secs
            );
            if config.expand_past_partial {
                s.push_str(" expand_past_partial");
            }
        }
        RequestEventKind::Dispatched { round, pharmacies } => {
            let list: Vec<String> = pharmacies
                .iter()
                .map(|d| format!("{}({:.2}km)", d.pharmacy_id, d.distance_km))
                .collect();
            let _ = write!(s, " round={round} to=[{}]", list.join(", "));
        }
        RequestEventKind::ResponseRecorded { response } => {
            let meds: Vec<&str> = response
                .available_medicine_ids
                .iter()
                .map(|m| m.as_str())
                .collect();
            let _ = write!(
                s,
                " pharmacy={} verdict={} available=[{}]",
                response.pharmacy_id,
                response.verdict,
                meds.join(",")
            );
        }
        RequestEventKind::RoundExpanded { round, radius_km } => {
            let _ = write!(s, " round={round} radius={radius_km}km");
        }
        RequestEventKind::StateChanged { from, to } => {
            let _ = write!(s, " {from} -> {to}");
        }
        RequestEventKind::Cancelled => {}
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{GeoPoint, PharmacyResponse, Verdict};
    use crate::engine::{Dispatch, RequestConfig, RequestState};
    use chrono::{TimeZone, Utc};
    use std::collections::BTreeSet;

    fn t(m: i64) -> Timestamp {
        Utc.with_ymd_and_hms(2024, 1, 1, 9, 0, 0).unwrap() + chrono::Duration::minutes(m)
    }

    fn opened() -> RequestEventKind {
        RequestEventKind::Opened {
            prescription_id: "rx-1".into(),
            owner: "alice".into(),
            origin: GeoPoint::new(41.15, -8.61).unwrap(),
            medicine_ids: ["A", "B"].into_iter().map(Into::into).collect(),
            config: RequestConfig::default(),
        }
    }

    fn dispatched(ids: &[&str]) -> RequestEventKind {
        RequestEventKind::Dispatched {
            round: 1,
            pharmacies: ids
                .iter()
                .enumerate()
                .map(|(i, p)| Dispatch {
                    pharmacy_id: (*p).into(),
                    distance_km: i as f64 + 1.0,
                })
                .collect(),
        }
    }

    fn full(p: &str) -> RequestEventKind {
        let meds: BTreeSet<_> = ["A", "B"].into_iter().map(Into::into).collect();
        RequestEventKind::ResponseRecorded {
            response: PharmacyResponse::quick("req-1".into(), p.into(), &meds, Verdict::Full, t(2))
                .unwrap(),
        }
    }

    fn rid() -> RequestId {
        "req-1".into()
    }

    #[test]
    fn sequences_and_invalid_trace() {
        let mut s = Store::in_memory();
        assert!(matches!(
            s.append(&rid(), t(0), full("P1")),
            Err(StoreError::InvalidTrace { .. })
        ));
        assert_eq!(s.append(&rid(), t(0), opened()).unwrap(), 1);
        assert_eq!(s.append(&rid(), t(0), dispatched(&["P1", "P2"])).unwrap(), 2);
        assert_eq!(s.append(&rid(), t(2), full("P2")).unwrap(), 3);
        // re-append is idempotent
        assert_eq!(s.append(&rid(), t(2), full("P2")).unwrap(), 3);
        assert_eq!(s.events(&rid()).len(), 3);
        assert_eq!(s.replay(&rid()).unwrap().state, RequestState::FulfilledFull);
        assert!(matches!(s.replay(&"nope".into()), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn exhausted_trace_replays() {
        let mut s = Store::in_memory();
        s.append(&rid(), t(0), opened()).unwrap();
        for (round, radius_km) in [(2, 10.0), (3, 20.0), (4, 40.0), (5, 50.0)] {
            s.append(&rid(), t(10), RequestEventKind::RoundExpanded { round, radius_km })
                .unwrap();
        }
        s.append(
            &rid(),
            t(10),
            RequestEventKind::StateChanged {
                from: RequestState::Expanding,
                to: RequestState::Exhausted,
            },
        )
        .unwrap();
        assert_eq!(s.replay(&rid()).unwrap().state, RequestState::Exhausted);
    }

    #[test]
    fn entity_roundtrip_and_unknown_kind() {
        let dir = tempfile::tempdir().unwrap();
        let ps: Vec<Pharmacy> = (1..=3)
            .map(|i| Pharmacy {
                id: format!("P{i}").into(),
                name: format!("Farmacia {i}"),
                location: GeoPoint::new(41.0 + i as f64 / 100.0, -8.6).unwrap(),
                contact: "c".into(),
                registered: i != 2,
            })
            .collect();
        {
            let mut s = Store::open(dir.path()).unwrap();
            assert!(s.is_empty());
            assert_eq!(s.save_entities(&ps).unwrap(), 3);
            assert_eq!(s.save_entities::<Medicine>(&[]).unwrap(), 0);
        }
        let s = Store::open(dir.path()).unwrap();
        assert_eq!(s.load_entities::<Pharmacy>().unwrap(), ps);
        assert!(s.load_entities::<Medicine>().unwrap().is_empty());
        assert!(matches!(s.load_raw("spaceships"), Err(StoreError::UnknownKind(_))));
        assert_eq!(s.load_raw("pharmacies").unwrap().len(), 3);
    }

    #[test]
    fn invalid_entities_rejected() {
        let mut s = Store::in_memory();
        let bad = Medicine {
            id: "M1".into(),
            name: " ".into(),
            dosage: String::new(),
            package: String::new(),
        };
        assert!(matches!(s.save_entities(&[bad]), Err(StoreError::Validation { .. })));
    }

    #[test]
    fn torn_tail_is_dropped_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Store::open(dir.path()).unwrap();
            s.append(&rid(), t(0), opened()).unwrap();
            s.append(&rid(), t(0), dispatched(&["P1"])).unwrap();
        }
        let path = Store::file_path(dir.path());
        let mut bytes = std::fs::read(&path).unwrap();
        let good = bytes.len();
        bytes.extend_from_slice(br#"{"record":"event","seq"#);
        std::fs::write(&path, &bytes).unwrap();
        let mut s = Store::open(dir.path()).unwrap();
        assert_eq!(s.events(&rid()).len(), 2);
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, good);
        assert_eq!(s.append(&rid(), t(1), full("P1")).unwrap(), 3);
        drop(s);
        let s = Store::open(dir.path()).unwrap();
        assert_eq!(s.replay(&rid()).unwrap().state, RequestState::FulfilledFull);
    }

    #[test]
    fn corruption_in_the_middle_is_an_error() {
        let text = "{\"record\":\"entities\",\"kind\":\"users\",\"records\":[]}\ngarbage\n{\"record\":\"entities\",\"kind\":\"users\",\"records\":[]}\n";
        assert!(matches!(
            decode_log(text.as_bytes()),
            Err(StoreError::Corrupt { line: 2, .. })
        ));
        let torn = "{\"record\":\"entities\",\"kind\":\"users\",\"records\":[]}\ngarbage\n";
        let d = decode_log(torn.as_bytes()).unwrap();
        assert_eq!(d.records.len(), 1);
        assert_eq!(d.valid_len, torn.find('g').unwrap());
    }

    #[test]
    fn dump_format() {
        let mut s = Store::in_memory();
        s.append(&rid(), t(0), opened()).unwrap();
        s.append(&rid(), t(0), dispatched(&["P1", "P2"])).unwrap();
        let lines: Vec<String> = s.events(&rid()).iter().map(format_event).collect();
        assert!(lines[0].contains("opened prescription=rx-1"), "{}", lines[0]);
        assert!(lines[1].contains("P1(1.00km), P2(2.00km)"), "{}", lines[1]);
    }
}
