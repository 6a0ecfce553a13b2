//! Orchestration of prescriptions, availability requests, the event log and
//! notifications. This is what the HTTP layer calls.
//!
//! Locking: each request has its own mutex, so transitions of one request are
//! serialized while different requests proceed independently. A transition is
//! computed on a copy, appended to the store, and only then published, so a
//! failed write leaves the in-memory request untouched. Lock order is
//! prescriptions → request → store → notifier.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::Deserialize;
use thiserror::Error;

use crate::auth::{TokenTable, UserRecord};
use crate::catalog::Catalog;
use crate::clock::Clock;
use crate::domain::{
    DomainError, GeoPoint, Medicine, MedicineId, Pharmacy, PharmacyId, PharmacyResponse,
    Prescription, PrescriptionId, PrescriptionLine, PrescriptionStatus, RequestId, Timestamp,
    UserId, Verdict,
};
use crate::engine::{
    self, AvailabilityRequest, EngineError, RequestConfig, RequestEventKind, ResponseOutcome,
    Transition,
};
use crate::geo::{GeoRegistry, Nearby, RegistryError};
use crate::notifier::{Notification, NotificationEvent, NotificationId, Notifier, NotifierError};
use crate::store::{Store, StoreError};

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("unknown medicine id {0}")]
    UnknownMedicine(MedicineId),
    #[error("invalid prescription: {0}")]
    InvalidPrescription(DomainError),
    #[error("invalid location: {0}")]
    InvalidLocation(DomainError),
    #[error("{0}")]
    InvalidConfig(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("engine: {0}")]
    Engine(EngineError),
}

impl From<NotifierError> for BrokerError {
    fn from(e: NotifierError) -> Self {
        BrokerError::NotFound(e.to_string().trim_end_matches(" not found").to_owned())
    }
}

/// Per-request overrides of the default [`RequestConfig`].
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub initial_radius_km: Option<f64>,
    pub expansion_factor: Option<f64>,
    pub max_radius_km: Option<f64>,
    pub round_timeout_secs: Option<u64>,
    pub expand_past_partial: Option<bool>,
}

impl ConfigOverrides {
    pub fn apply(&self, base: RequestConfig) -> RequestConfig {
        RequestConfig {
            initial_radius_km: self.initial_radius_km.unwrap_or(base.initial_radius_km),
            expansion_factor: self.expansion_factor.unwrap_or(base.expansion_factor),
            max_radius_km: self.max_radius_km.unwrap_or(base.max_radius_km),
            round_timeout_secs: self.round_timeout_secs.unwrap_or(base.round_timeout_secs),
            expand_past_partial: self.expand_past_partial.unwrap_or(base.expand_past_partial),
        }
    }
}

/// A pharmacist's answer as submitted: a quick button or a checkbox selection.
#[derive(Debug, Clone, PartialEq)]
pub enum ResponseForm {
    Quick(Verdict),
    Available(Vec<MedicineId>),
}

/// World data a broker starts from when its store is empty.
#[derive(Debug, Clone, Default)]
pub struct Seed {
    pub pharmacies: Vec<Pharmacy>,
    pub medicines: Vec<Medicine>,
    pub users: Vec<UserRecord>,
}

#[derive(Debug, Default)]
struct Counters {
    prescription: u64,
    request: u64,
}

pub struct Broker {
    clock: Arc<dyn Clock>,
    defaults: RequestConfig,
    registry: GeoRegistry,
    catalog: Catalog,
    tokens: TokenTable,
    notifier: Notifier,
    store: Mutex<Store>,
    prescriptions: Mutex<BTreeMap<PrescriptionId, Prescription>>,
    requests: RwLock<BTreeMap<RequestId, Arc<Mutex<AvailabilityRequest>>>>,
    counters: Mutex<Counters>,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker")
            .field("defaults", &self.defaults)
            .field("pharmacies", &self.registry.snapshot().len())
            .field("medicines", &self.catalog.len())
            .finish_non_exhaustive()
    }
}

fn numeric_suffix(id: &str, prefix: &str) -> u64 {
    id.strip_prefix(prefix)
        .and_then(|n| n.parse().ok())
        .unwrap_or(0)
}

impl Broker {
    /// In-memory broker over the given world.
    pub fn in_memory(seed: Seed, clock: Arc<dyn Clock>) -> Result<Self, BrokerError> {
        Self::with_store(Store::in_memory(), seed, clock)
    }

    /// Opens the store in `data_dir`. An empty store is initialised from `seed`;
    /// otherwise entities and requests are recovered from the log.
    pub fn open(data_dir: &Path, seed: Seed, clock: Arc<dyn Clock>) -> Result<Self, BrokerError> {
        Self::with_store(Store::open(data_dir)?, seed, clock)
    }

    fn with_store(mut store: Store, seed: Seed, clock: Arc<dyn Clock>) -> Result<Self, BrokerError> {
        let mut pharmacies: Vec<Pharmacy> = store.load_entities()?;
        let mut medicines: Vec<Medicine> = store.load_entities()?;
        let mut users: Vec<UserRecord> = store.load_entities()?;
        if pharmacies.is_empty() && !seed.pharmacies.is_empty() {
            store.save_entities(&seed.pharmacies)?;
            pharmacies = seed.pharmacies;
        }
        if medicines.is_empty() && !seed.medicines.is_empty() {
            store.save_entities(&seed.medicines)?;
            medicines = seed.medicines;
        }
        if users.is_empty() && !seed.users.is_empty() {
            store.save_entities(&seed.users)?;
            users = seed.users;
        }
        let catalog = Catalog::new(medicines)
            .map_err(|e| BrokerError::InvalidConfig(format!("catalog: {e}")))?;
        let registry = GeoRegistry::from_pharmacies(pharmacies)?;
        let prescriptions: Vec<Prescription> = store.load_entities()?;

        let mut counters = Counters::default();
        for p in &prescriptions {
            counters.prescription = counters.prescription.max(numeric_suffix(p.id.as_str(), "rx-"));
        }
        let mut requests = BTreeMap::new();
        for id in store.request_ids() {
            counters.request = counters.request.max(numeric_suffix(id.as_str(), "req-"));
            let snap = store.snapshot(id).expect("stored request has a snapshot").clone();
            requests.insert(id.clone(), Arc::new(Mutex::new(snap)));
        }

        let notifier = Notifier::default();
        rebuild_notifications(&store, &notifier)?;

        Ok(Self {
            clock,
            defaults: RequestConfig::default(),
            registry,
            catalog,
            tokens: TokenTable::new(&users),
            notifier,
            store: Mutex::new(store),
            prescriptions: Mutex::new(prescriptions.into_iter().map(|p| (p.id.clone(), p)).collect()),
            requests: RwLock::new(requests),
            counters: Mutex::new(counters),
        })
    }

    pub fn with_defaults(mut self, defaults: RequestConfig) -> Result<Self, BrokerError> {
        defaults.validate().map_err(|e| BrokerError::InvalidConfig(e.to_string()))?;
        self.defaults = defaults;
        Ok(self)
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn defaults(&self) -> RequestConfig {
        self.defaults
    }

    pub fn tokens(&self) -> &TokenTable {
        &self.tokens
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn registry(&self) -> &GeoRegistry {
        &self.registry
    }

    pub fn notifier(&self) -> &Notifier {
        &self.notifier
    }

    // -- catalog and map ----------------------------------------------------

    pub fn autocomplete(&self, prefix: &str, limit: usize) -> Vec<Medicine> {
        self.catalog.autocomplete(prefix, limit)
    }

    pub fn nearby(&self, lat: f64, lon: f64, radius_km: f64) -> Result<Vec<Nearby>, BrokerError> {
        let origin = GeoPoint::new(lat, lon).map_err(BrokerError::InvalidLocation)?;
        if !(radius_km.is_finite() && radius_km > 0.0) {
            return Err(BrokerError::InvalidConfig(format!(
                "radius_km must be positive, got {radius_km}"
            )));
        }
        Ok(self.registry.within_radius(origin, radius_km))
    }

    // -- prescriptions ------------------------------------------------------

    fn check_lines(&self, lines: &[PrescriptionLine]) -> Result<(), BrokerError> {
        for l in lines {
            if !self.catalog.contains(&l.medicine_id) {
                return Err(BrokerError::UnknownMedicine(l.medicine_id.clone()));
            }
        }
        Ok(())
    }

    fn persist_prescriptions(
        &self,
        all: &BTreeMap<PrescriptionId, Prescription>,
    ) -> Result<(), BrokerError> {
        let records: Vec<Prescription> = all.values().cloned().collect();
        self.store.lock().expect("store lock poisoned").save_entities(&records)?;
        Ok(())
    }

    pub fn submit_prescription(
        &self,
        patient: &UserId,
        lines: Vec<PrescriptionLine>,
    ) -> Result<Prescription, BrokerError> {
        self.check_lines(&lines)?;
        let mut all = self.prescriptions.lock().expect("prescriptions lock poisoned");
        let id = {
            let mut c = self.counters.lock().expect("counter lock poisoned");
            c.prescription += 1;
            PrescriptionId(format!("rx-{}", c.prescription))
        };
        let p = Prescription::submitted(id, patient.clone(), lines)
            .map_err(BrokerError::InvalidPrescription)?;
        all.insert(p.id.clone(), p.clone());
        if let Err(e) = self.persist_prescriptions(&all) {
            all.remove(&p.id);
            return Err(e);
        }
        Ok(p)
    }

    pub fn prescription(&self, patient: &UserId, id: &PrescriptionId) -> Result<Prescription, BrokerError> {
        let all = self.prescriptions.lock().expect("prescriptions lock poisoned");
        match all.get(id) {
            Some(p) if &p.patient_id == patient => Ok(p.clone()),
            _ => Err(BrokerError::NotFound(format!("prescription {id}"))),
        }
    }

    pub fn prescriptions_of(&self, patient: &UserId) -> Vec<Prescription> {
        let all = self.prescriptions.lock().expect("prescriptions lock poisoned");
        all.values().filter(|p| &p.patient_id == patient).cloned().collect()
    }

    fn active_request_for(&self, prescription: &PrescriptionId) -> Option<RequestId> {
        let requests = self.requests.read().expect("requests lock poisoned");
        requests.iter().find_map(|(id, r)| {
            let r = r.lock().expect("request lock poisoned");
            (&r.prescription_id == prescription && !r.is_terminal()).then(|| id.clone())
        })
    }

    /// Replaces the lines of a prescription that has no request in flight.
    pub fn edit_prescription(
        &self,
        patient: &UserId,
        id: &PrescriptionId,
        lines: Vec<PrescriptionLine>,
    ) -> Result<Prescription, BrokerError> {
        self.check_lines(&lines)?;
        let mut all = self.prescriptions.lock().expect("prescriptions lock poisoned");
        let current = match all.get(id) {
            Some(p) if &p.patient_id == patient => p.clone(),
            _ => return Err(BrokerError::NotFound(format!("prescription {id}"))),
        };
        if current.status != PrescriptionStatus::Submitted {
            return Err(BrokerError::Conflict(format!("prescription {id} is {:?}", current.status)));
        }
        if let Some(req) = self.active_request_for(id) {
            return Err(BrokerError::Conflict(format!(
                "prescription {id} has an open request {req}"
            )));
        }
        let edited = Prescription::submitted(id.clone(), patient.clone(), lines)
            .map_err(BrokerError::InvalidPrescription)?;
        all.insert(id.clone(), edited.clone());
        if let Err(e) = self.persist_prescriptions(&all) {
            all.insert(id.clone(), current);
            return Err(e);
        }
        Ok(edited)
    }

    /// Cancels a prescription, and its request in flight if there is one.
    pub fn cancel_prescription(&self, patient: &UserId, id: &PrescriptionId) -> Result<Prescription, BrokerError> {
        let mut p = self.prescription(patient, id)?;
        if p.status == PrescriptionStatus::Cancelled {
            return Ok(p);
        }
        if let Some(req) = self.active_request_for(id) {
            match self.cancel_request(patient, &req) {
                Ok(_) | Err(BrokerError::Conflict(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let mut all = self.prescriptions.lock().expect("prescriptions lock poisoned");
        p.status = PrescriptionStatus::Cancelled;
        all.insert(id.clone(), p.clone());
        self.persist_prescriptions(&all)?;
        Ok(p)
    }

    // -- requests -----------------------------------------------------------

    fn handle(&self, id: &RequestId) -> Result<Arc<Mutex<AvailabilityRequest>>, BrokerError> {
        self.requests
            .read()
            .expect("requests lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| BrokerError::NotFound(format!("request {id}")))
    }

    /// Appends a transition to the log and emits its notifications.
    fn commit(
        &self,
        req: &AvailabilityRequest,
        at: Timestamp,
        tr: &Transition,
        recorded: Option<&PharmacyResponse>,
    ) -> Result<(), BrokerError> {
        self.store
            .lock()
            .expect("store lock poisoned")
            .append_all(&req.id, at, tr.events.iter().cloned())?;
        if let Some(r) = recorded {
            self.notifier.emit(
                NotificationEvent::PharmacyResponse {
                    request_id: req.id.clone(),
                    pharmacy_id: r.pharmacy_id.clone(),
                    verdict: r.verdict,
                },
                &req.owner,
                at,
            );
        }
        for (from, to) in &tr.state_changes {
            self.notifier.emit(
                NotificationEvent::StateChange {
                    request_id: req.id.clone(),
                    from: *from,
                    to: *to,
                },
                &req.owner,
                at,
            );
        }
        Ok(())
    }

    /// Opens an availability request for a submitted prescription.
    pub fn request_availability(
        &self,
        patient: &UserId,
        prescription_id: &PrescriptionId,
        lat: f64,
        lon: f64,
        overrides: &ConfigOverrides,
    ) -> Result<(AvailabilityRequest, Vec<PharmacyId>), BrokerError> {
        let origin = GeoPoint::new(lat, lon).map_err(BrokerError::InvalidLocation)?;
        let config = overrides.apply(self.defaults);
        config
            .validate()
            .map_err(|e| BrokerError::InvalidConfig(e.to_string()))?;
        // Held for the whole open so two concurrent opens of one prescription serialize.
        let prescriptions = self.prescriptions.lock().expect("prescriptions lock poisoned");
        let prescription = match prescriptions.get(prescription_id) {
            Some(p) if &p.patient_id == patient => p.clone(),
            _ => return Err(BrokerError::NotFound(format!("prescription {prescription_id}"))),
        };
        if let Some(existing) = self.active_request_for(prescription_id) {
            return Err(BrokerError::Conflict(format!(
                "prescription {prescription_id} already has an open request {existing}"
            )));
        }
        let id = {
            let mut c = self.counters.lock().expect("counter lock poisoned");
            c.request += 1;
            RequestId(format!("req-{}", c.request))
        };
        let now = self.clock.now();
        let snapshot = self.registry.snapshot();
        let (req, tr) = engine::open_request(id.clone(), &prescription, origin, config, &snapshot, now)
            .map_err(|e| match e {
                EngineError::NotSubmitted(_) | EngineError::EmptyPrescription(_) => {
                    BrokerError::Conflict(e.to_string())
                }
                other => BrokerError::Engine(other),
            })?;
        self.commit(&req, now, &tr, None)?;
        self.requests
            .write()
            .expect("requests lock poisoned")
            .insert(id, Arc::new(Mutex::new(req.clone())));
        drop(prescriptions);
        Ok((req, tr.dispatched))
    }

    /// Snapshot of a request, visible to its owner only.
    pub fn request(&self, user: &UserId, id: &RequestId) -> Result<AvailabilityRequest, BrokerError> {
        let req = self.handle(id)?.lock().expect("request lock poisoned").clone();
        if &req.owner != user {
            return Err(BrokerError::Forbidden(format!("request {id} belongs to another patient")));
        }
        Ok(req)
    }

    pub fn requests_of(&self, user: &UserId) -> Vec<AvailabilityRequest> {
        let requests = self.requests.read().expect("requests lock poisoned");
        requests
            .values()
            .map(|r| r.lock().expect("request lock poisoned").clone())
            .filter(|r| &r.owner == user)
            .collect()
    }

    pub fn cancel_request(&self, user: &UserId, id: &RequestId) -> Result<AvailabilityRequest, BrokerError> {
        let handle = self.handle(id)?;
        let mut guard = handle.lock().expect("request lock poisoned");
        if &guard.owner != user {
            return Err(BrokerError::Forbidden(format!("request {id} belongs to another patient")));
        }
        let now = self.clock.now();
        let mut next = guard.clone();
        let tr = engine::cancel(&mut next, now).map_err(|e| BrokerError::Conflict(e.to_string()))?;
        self.commit(&next, now, &tr, None)?;
        *guard = next.clone();
        Ok(next)
    }

    /// Requests addressed to `pharmacy` that it has not answered and that are still open.
    pub fn pharmacy_inbox(&self, pharmacy: &PharmacyId) -> Vec<(AvailabilityRequest, Prescription)> {
        let open: Vec<AvailabilityRequest> = {
            let requests = self.requests.read().expect("requests lock poisoned");
            requests
                .values()
                .map(|r| r.lock().expect("request lock poisoned").clone())
                .filter(|r| {
                    !r.is_terminal() && r.enquired.contains_key(pharmacy) && !r.has_answered(pharmacy)
                })
                .collect()
        };
        let prescriptions = self.prescriptions.lock().expect("prescriptions lock poisoned");
        open.into_iter()
            .filter_map(|r| {
                let p = prescriptions.get(&r.prescription_id)?.clone();
                Some((r, p))
            })
            .collect()
    }

    /// Records a pharmacist's answer.
    pub fn respond(
        &self,
        pharmacy: &PharmacyId,
        id: &RequestId,
        form: ResponseForm,
    ) -> Result<(AvailabilityRequest, PharmacyResponse), BrokerError> {
        let handle = self.handle(id)?;
        let mut guard = handle.lock().expect("request lock poisoned");
        if !guard.enquired.contains_key(pharmacy) {
            return Err(BrokerError::NotFound(format!("request {id}")));
        }
        if guard.has_answered(pharmacy) {
            return Err(BrokerError::Conflict(format!(
                "pharmacy {pharmacy} already answered request {id}"
            )));
        }
        let now = self.clock.now();
        let response = match form {
            ResponseForm::Quick(v) => {
                PharmacyResponse::quick(id.clone(), pharmacy.clone(), &guard.medicine_ids, v, now)
            }
            ResponseForm::Available(ids) => {
                let set: BTreeSet<MedicineId> = ids.iter().cloned().collect();
                if set.len() != ids.len() {
                    return Err(BrokerError::InvalidResponse("duplicate medicine ids".into()));
                }
                PharmacyResponse::from_available(id.clone(), pharmacy.clone(), &guard.medicine_ids, set, now)
            }
        }
        .map_err(|e| BrokerError::InvalidResponse(e.to_string()))?;
        let mut next = guard.clone();
        let snapshot = self.registry.snapshot();
        let (outcome, tr) = engine::record_response(&mut next, response.clone(), &snapshot, now)
            .map_err(|e| match e {
                EngineError::InvalidResponse(d) => BrokerError::InvalidResponse(d.to_string()),
                other => BrokerError::Engine(other),
            })?;
        let recorded = (outcome == ResponseOutcome::Recorded).then_some(&response);
        self.commit(&next, now, &tr, recorded)?;
        *guard = next.clone();
        Ok((next, response))
    }

    /// Runs the timeout rule on every request at the current clock time.
    /// Returns the ids of requests that changed.
    pub fn tick_all(&self) -> Result<Vec<RequestId>, BrokerError> {
        let now = self.clock.now();
        let handles: Vec<(RequestId, Arc<Mutex<AvailabilityRequest>>)> = self
            .requests
            .read()
            .expect("requests lock poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let snapshot = self.registry.snapshot();
        let mut changed = Vec::new();
        for (id, handle) in handles {
            let mut guard = handle.lock().expect("request lock poisoned");
            // Several rounds may have elapsed since the last tick.
            loop {
                if guard.is_terminal() || now < guard.round_deadline {
                    break;
                }
                let mut next = guard.clone();
                let tr = engine::tick(&mut next, &snapshot, now).map_err(BrokerError::Engine)?;
                if tr.is_noop() {
                    break;
                }
                self.commit(&next, now, &tr, None)?;
                *guard = next;
                if changed.last() != Some(&id) {
                    changed.push(id.clone());
                }
            }
        }
        Ok(changed)
    }

    /// Earliest round deadline among requests still in flight.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        let requests = self.requests.read().expect("requests lock poisoned");
        requests
            .values()
            .filter_map(|r| {
                let r = r.lock().expect("request lock poisoned");
                (!r.is_terminal()).then_some(r.round_deadline)
            })
            .min()
    }

    // -- notifications ------------------------------------------------------

    pub fn notifications(&self, user: &UserId, unread_only: bool) -> Vec<Notification> {
        self.notifier.list(user, unread_only)
    }

    pub fn notifications_since(&self, user: &UserId, after: NotificationId) -> Vec<Notification> {
        self.notifier.since(user, after)
    }

    pub fn mark_read(&self, user: &UserId, ids: &[NotificationId]) -> Result<usize, BrokerError> {
        Ok(self.notifier.mark_read(user, ids)?)
    }

    // -- log ----------------------------------------------------------------

    pub fn events_since(&self, after: u64) -> Vec<crate::engine::RequestEvent> {
        self.store.lock().expect("store lock poisoned").events_since(after)
    }

    pub fn request_events(&self, id: &RequestId) -> Vec<crate::engine::RequestEvent> {
        self.store.lock().expect("store lock poisoned").events(id).to_vec()
    }

    /// Compares every in-memory request with a from-scratch replay of its log.
    /// Returns the ids that differ.
    pub fn replay_mismatches(&self) -> Result<Vec<RequestId>, BrokerError> {
        let requests = self.requests.read().expect("requests lock poisoned");
        let store = self.store.lock().expect("store lock poisoned");
        let mut bad = Vec::new();
        for (id, handle) in requests.iter() {
            let live = handle.lock().expect("request lock poisoned");
            if store.replay(id)? != *live {
                bad.push(id.clone());
            }
        }
        Ok(bad)
    }
}

/// Re-derives the inbox from the event log, in log order.
fn rebuild_notifications(store: &Store, notifier: &Notifier) -> Result<(), BrokerError> {
    let mut live: BTreeMap<RequestId, AvailabilityRequest> = BTreeMap::new();
    for ev in store.events_since(0) {
        let id = ev.request_id.clone();
        let Some(req) = live.get_mut(&id) else {
            let req = AvailabilityRequest::replay([&ev])
                .map_err(|source| StoreError::InvalidTrace {
                    request_id: id.clone(),
                    source,
                })?
                .expect("opened event");
            live.insert(id, req);
            continue;
        };
        let was_terminal = req.is_terminal();
        let change = req.apply(ev.at, &ev.kind).map_err(|source| StoreError::InvalidTrace {
            request_id: id.clone(),
            source,
        })?;
        if let RequestEventKind::ResponseRecorded { response } = &ev.kind {
            if !was_terminal {
                notifier.emit(
                    NotificationEvent::PharmacyResponse {
                        request_id: id.clone(),
                        pharmacy_id: response.pharmacy_id.clone(),
                        verdict: response.verdict,
                    },
                    &req.owner,
                    ev.at,
                );
            }
        }
        if let Some((from, to)) = change {
            notifier.emit(
                NotificationEvent::StateChange {
                    request_id: id.clone(),
                    from,
                    to,
                },
                &req.owner,
                ev.at,
            );
        }
    }
    Ok(())
}
