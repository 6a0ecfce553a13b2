//! Availability-request state machine.
//!
//! A request is opened against the pharmacies inside the initial radius. When
//! the round deadline passes without a settling answer the radius grows by
//! `expansion_factor` (capped at `max_radius_km`) and only newly covered
//! pharmacies are enquired. A full answer settles the request immediately;
//! partial answers settle it when the round closes unless
//! `expand_past_partial` is set.
//!
//! Every operation is expressed as a list of [`RequestEventKind`]s which are
//! applied to the request through [`AvailabilityRequest::apply`]. Replaying a
//! stored log goes through the same function, so the in-memory state and the
//! replayed state cannot drift apart.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    DomainError, GeoPoint, MedicineId, PharmacyId, PharmacyResponse, Prescription,
    PrescriptionId, PrescriptionStatus, RequestId, Timestamp, UserId, Verdict,
};
use crate::geo::RegistrySnapshot;

const RADIUS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestConfig {
    pub initial_radius_km: f64,
    pub expansion_factor: f64,
    pub max_radius_km: f64,
    pub round_timeout_secs: u64,
    pub expand_past_partial: bool,
}

impl Default for RequestConfig {
    fn default() -> Self {
        Self {
            initial_radius_km: 5.0,
            expansion_factor: 2.0,
            max_radius_km: 50.0,
            round_timeout_secs: 600,
            expand_past_partial: false,
        }
    }
}

impl RequestConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_owned()));
        if !(self.initial_radius_km.is_finite() && self.initial_radius_km > 0.0) {
            return bad("initial_radius_km must be positive");
        }
        if !(self.max_radius_km.is_finite() && self.max_radius_km >= self.initial_radius_km) {
            return bad("max_radius_km must be at least initial_radius_km");
        }
        if !(self.expansion_factor.is_finite() && self.expansion_factor > 1.0) {
            return bad("expansion_factor must be greater than 1");
        }
        if self.round_timeout_secs == 0 {
            return bad("round_timeout_secs must be positive");
        }
        Ok(())
    }

    pub fn round_timeout(&self) -> Duration {
        Duration::seconds(self.round_timeout_secs as i64)
    }

    /// `initial · factor^(round−1)`, capped at the maximum radius.
    pub fn radius_for_round(&self, round: u32) -> f64 {
        let exp = round.saturating_sub(1).min(i32::MAX as u32) as i32;
        (self.initial_radius_km * self.expansion_factor.powi(exp)).min(self.max_radius_km)
    }

    /// Upper bound on the number of rounds any request can go through.
    pub fn max_rounds(&self) -> u32 {
        let ratio = self.max_radius_km / self.initial_radius_km;
        let steps = (ratio.ln() / self.expansion_factor.ln() - 1e-12).ceil().max(0.0);
        steps as u32 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Open,
    Expanding,
    FulfilledFull,
    FulfilledPartial,
    Exhausted,
    Cancelled,
}

impl RequestState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            Self::FulfilledFull | Self::FulfilledPartial | Self::Exhausted | Self::Cancelled
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Open => "open",
            Self::Expanding => "expanding",
            Self::FulfilledFull => "fulfilled_full",
            Self::FulfilledPartial => "fulfilled_partial",
            Self::Exhausted => "exhausted",
            Self::Cancelled => "cancelled",
        }
    }
}

impl fmt::Display for RequestState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub pharmacy_id: PharmacyId,
    pub distance_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RequestEventKind {
    Opened {
        prescription_id: PrescriptionId,
        owner: UserId,
        origin: GeoPoint,
        medicine_ids: BTreeSet<MedicineId>,
        config: RequestConfig,
    },
    Dispatched {
        round: u32,
        pharmacies: Vec<Dispatch>,
    },
    ResponseRecorded {
        response: PharmacyResponse,
    },
    RoundExpanded {
        round: u32,
        radius_km: f64,
    },
    StateChanged {
        from: RequestState,
        to: RequestState,
    },
    Cancelled,
}

impl RequestEventKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Opened { .. } => "opened",
            Self::Dispatched { .. } => "dispatched",
            Self::ResponseRecorded { .. } => "response_recorded",
            Self::RoundExpanded { .. } => "round_expanded",
            Self::StateChanged { .. } => "state_changed",
            Self::Cancelled => "cancelled",
        }
    }

    /// Identity of the event within its request; re-appending the same key is a no-op.
    pub fn dedup_key(&self) -> String {
        match self {
            Self::Opened { .. } => "opened".into(),
            Self::Dispatched { round, .. } => format!("dispatched:{round}"),
            Self::ResponseRecorded { response } => format!("response:{}", response.pharmacy_id),
            Self::RoundExpanded { round, .. } => format!("round:{round}"),
            Self::StateChanged { to, .. } => format!("state:{to}"),
            Self::Cancelled => "cancelled".into(),
        }
    }
}

/// An event as persisted in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEvent {
    pub sequence: u64,
    pub request_id: RequestId,
    pub at: Timestamp,
    #[serde(flatten)]
    pub kind: RequestEventKind,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("trace must start with an opened event, got {0}")]
    NotOpened(&'static str),
    #[error("request is already opened")]
    AlreadyOpened,
    #[error("event for request {got} applied to request {expected}")]
    WrongRequest { expected: RequestId, got: RequestId },
    #[error("{event} is not allowed in terminal state {state}")]
    Terminal { event: &'static str, state: RequestState },
    #[error("round {got} does not follow round {current}")]
    RoundGap { current: u32, got: u32 },
    #[error("radius {got} km does not match the configured {expected} km for this round")]
    RadiusMismatch { expected: f64, got: f64 },
    #[error("radius is already at its cap")]
    AtCap,
    #[error("pharmacy {0} was already enquired")]
    AlreadyEnquired(PharmacyId),
    #[error("empty dispatch")]
    EmptyDispatch,
    #[error("pharmacy {0} was never enquired")]
    NotEnquired(PharmacyId),
    #[error("pharmacy {0} already responded")]
    DuplicateResponse(PharmacyId),
    #[error("invalid response: {0}")]
    InvalidResponse(DomainError),
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: RequestState, to: RequestState },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("prescription {0} is not submitted")]
    NotSubmitted(PrescriptionId),
    #[error("prescription {0} has no lines")]
    EmptyPrescription(PrescriptionId),
    #[error("invalid request configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("pharmacy {0} was not enquired for this request")]
    UnknownPharmacy(PharmacyId),
    #[error("invalid response: {0}")]
    InvalidResponse(#[from] DomainError),
    #[error("cannot {action} a request in state {state}")]
    InvalidTransition {
        action: &'static str,
        state: RequestState,
    },
    #[error("trace violation: {0}")]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enquiry {
    pub round: u32,
    pub distance_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundInfo {
    pub round: u32,
    pub radius_km: f64,
    pub started_at: Timestamp,
    pub dispatched: Vec<PharmacyId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityRequest {
    pub id: RequestId,
    pub prescription_id: PrescriptionId,
    pub owner: UserId,
    pub origin: GeoPoint,
    pub medicine_ids: BTreeSet<MedicineId>,
    pub config: RequestConfig,
    pub round: u32,
    pub current_radius_km: f64,
    pub state: RequestState,
    pub enquired: BTreeMap<PharmacyId, Enquiry>,
    pub rounds: Vec<RoundInfo>,
    pub responses: BTreeMap<PharmacyId, PharmacyResponse>,
    /// Responses that arrived after the request settled. Kept, never acted on.
    pub late_responses: Vec<PharmacyResponse>,
    pub opened_at: Timestamp,
    pub round_deadline: Timestamp,
    pub updated_at: Timestamp,
}

/// What an engine operation did: the events it emitted (already applied),
/// the pharmacies newly dispatched, and every state change along the way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transition {
    pub events: Vec<RequestEventKind>,
    pub dispatched: Vec<PharmacyId>,
    pub state_changes: Vec<(RequestState, RequestState)>,
}

impl Transition {
    pub fn is_noop(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseOutcome {
    Recorded,
    /// Stored for audit only; the request had already settled.
    Late,
    /// The pharmacy had already answered; nothing changed.
    Duplicate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestPharmacy {
    pub pharmacy_id: PharmacyId,
    pub verdict: Verdict,
    pub distance_km: f64,
}

impl AvailabilityRequest {
    fn from_opened(request_id: RequestId, at: Timestamp, kind: &RequestEventKind) -> Result<Self, TraceError> {
        let RequestEventKind::Opened {
            prescription_id,
            owner,
            origin,
            medicine_ids,
            config,
        } = kind
        else {
            return Err(TraceError::NotOpened(kind.name()));
        };
        config
            .validate()
            .map_err(|e| TraceError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            id: request_id,
            prescription_id: prescription_id.clone(),
            owner: owner.clone(),
            origin: *origin,
            medicine_ids: medicine_ids.clone(),
            config: *config,
            round: 1,
            current_radius_km: config.radius_for_round(1),
            state: RequestState::Open,
            enquired: BTreeMap::new(),
            rounds: vec![RoundInfo {
                round: 1,
                radius_km: config.radius_for_round(1),
                started_at: at,
                dispatched: Vec::new(),
            }],
            responses: BTreeMap::new(),
            late_responses: Vec::new(),
            opened_at: at,
            round_deadline: at + config.round_timeout(),
            updated_at: at,
        })
    }

    /// Rebuilds a request from its event log.
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a RequestEvent>) -> Result<Option<Self>, TraceError> {
        let mut req: Option<Self> = None;
        for ev in events {
            match req.as_mut() {
                None => req = Some(Self::from_opened(ev.request_id.clone(), ev.at, &ev.kind)?),
                Some(r) => {
                    if r.id != ev.request_id {
                        return Err(TraceError::WrongRequest {
                            expected: r.id.clone(),
                            got: ev.request_id.clone(),
                        });
                    }
                    r.apply(ev.at, &ev.kind)?;
                }
            }
        }
        Ok(req)
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }

    pub fn at_cap(&self) -> bool {
        self.current_radius_km >= self.config.max_radius_km - RADIUS_EPS
    }

    pub fn has_partial(&self) -> bool {
        self.responses.values().any(|r| r.verdict == Verdict::Partial)
    }

    pub fn has_answered(&self, pharmacy: &PharmacyId) -> bool {
        self.responses.contains_key(pharmacy)
            || self.late_responses.iter().any(|r| &r.pharmacy_id == pharmacy)
    }

    pub fn current_round(&self) -> &RoundInfo {
        self.rounds.last().expect("a request always has a first round")
    }

    /// Applies one event, validating that it extends a legal trace. Returns the
    /// state change it caused, if any.
    pub fn apply(
        &mut self,
        at: Timestamp,
        kind: &RequestEventKind,
    ) -> Result<Option<(RequestState, RequestState)>, TraceError> {
        let before = self.state;
        let terminal = |event| TraceError::Terminal {
            event,
            state: before,
        };
        match kind {
            RequestEventKind::Opened { .. } => return Err(TraceError::AlreadyOpened),
            RequestEventKind::Dispatched { round, pharmacies } => {
                if self.is_terminal() {
                    return Err(terminal("dispatched"));
                }
                if *round != self.round {
                    return Err(TraceError::RoundGap {
                        current: self.round,
                        got: *round,
                    });
                }
                if pharmacies.is_empty() {
                    return Err(TraceError::EmptyDispatch);
                }
                let mut fresh = BTreeSet::new();
                for d in pharmacies {
                    if self.enquired.contains_key(&d.pharmacy_id) || !fresh.insert(&d.pharmacy_id) {
                        return Err(TraceError::AlreadyEnquired(d.pharmacy_id.clone()));
                    }
                }
                let info = self.rounds.last_mut().expect("first round exists");
                for d in pharmacies {
                    self.enquired.insert(
                        d.pharmacy_id.clone(),
                        Enquiry {
                            round: *round,
                            distance_km: d.distance_km,
                        },
                    );
                    info.dispatched.push(d.pharmacy_id.clone());
                }
            }
            RequestEventKind::ResponseRecorded { response } => {
                if response.request_id != self.id {
                    return Err(TraceError::WrongRequest {
                        expected: self.id.clone(),
                        got: response.request_id.clone(),
                    });
                }
                if !self.enquired.contains_key(&response.pharmacy_id) {
                    return Err(TraceError::NotEnquired(response.pharmacy_id.clone()));
                }
                if self.has_answered(&response.pharmacy_id) {
                    return Err(TraceError::DuplicateResponse(response.pharmacy_id.clone()));
                }
                response
                    .validate(&self.medicine_ids)
                    .map_err(TraceError::InvalidResponse)?;
                if self.is_terminal() {
                    self.late_responses.push(response.clone());
                } else {
                    self.responses
                        .insert(response.pharmacy_id.clone(), response.clone());
                    if response.verdict == Verdict::Full {
                        self.state = RequestState::FulfilledFull;
                    }
                }
            }
            RequestEventKind::RoundExpanded { round, radius_km } => {
                if self.is_terminal() {
                    return Err(terminal("round_expanded"));
                }
                if *round != self.round + 1 {
                    return Err(TraceError::RoundGap {
                        current: self.round,
                        got: *round,
                    });
                }
                if self.at_cap() {
                    return Err(TraceError::AtCap);
                }
                let expected = self.config.radius_for_round(*round);
                if (expected - radius_km).abs() > RADIUS_EPS {
                    return Err(TraceError::RadiusMismatch {
                        expected,
                        got: *radius_km,
                    });
                }
                self.round = *round;
                self.current_radius_km = expected;
                self.round_deadline = at + self.config.round_timeout();
                self.rounds.push(RoundInfo {
                    round: *round,
                    radius_km: expected,
                    started_at: at,
                    dispatched: Vec::new(),
                });
                self.state = RequestState::Expanding;
            }
            RequestEventKind::StateChanged { from, to } => {
                if self.is_terminal() {
                    return Err(terminal("state_changed"));
                }
                let legal = *from == self.state
                    && match to {
                        RequestState::FulfilledPartial => self.has_partial(),
                        RequestState::Exhausted => self.at_cap(),
                        _ => false,
                    };
                if !legal {
                    return Err(TraceError::IllegalTransition {
                        from: *from,
                        to: *to,
                    });
                }
                self.state = *to;
            }
            RequestEventKind::Cancelled => {
                if self.is_terminal() {
                    return Err(terminal("cancelled"));
                }
                self.state = RequestState::Cancelled;
            }
        }
        self.updated_at = at;
        Ok((self.state != before).then_some((before, self.state)))
    }

    /// Ranks recorded answers: full over partial, then more medicines covered,
    /// then closer, then lower id. `None` answers never win.
    pub fn best_pharmacy(&self) -> Option<BestPharmacy> {
        self.responses
            .values()
            .filter(|r| r.verdict != Verdict::None)
            .map(|r| BestPharmacy {
                pharmacy_id: r.pharmacy_id.clone(),
                verdict: r.verdict,
                distance_km: self.enquired[&r.pharmacy_id].distance_km,
            })
            .min_by(|a, b| {
                let cover = |p: &BestPharmacy| self.responses[&p.pharmacy_id].available_medicine_ids.len();
                b.verdict
                    .cmp(&a.verdict)
                    .then_with(|| cover(b).cmp(&cover(a)))
                    .then_with(|| a.distance_km.total_cmp(&b.distance_km))
                    .then_with(|| a.pharmacy_id.cmp(&b.pharmacy_id))
            })
    }
}

/// Collects events while applying them to the request.
struct Recorder<'a> {
    req: &'a mut AvailabilityRequest,
    at: Timestamp,
    out: Transition,
}

impl<'a> Recorder<'a> {
    fn new(req: &'a mut AvailabilityRequest, at: Timestamp) -> Self {
        Self {
            req,
            at,
            out: Transition::default(),
        }
    }

    fn emit(&mut self, kind: RequestEventKind) -> Result<(), TraceError> {
        if let Some(change) = self.req.apply(self.at, &kind)? {
            self.out.state_changes.push(change);
        }
        if let RequestEventKind::Dispatched { pharmacies, .. } = &kind {
            self.out
                .dispatched
                .extend(pharmacies.iter().map(|d| d.pharmacy_id.clone()));
        }
        self.out.events.push(kind);
        Ok(())
    }

    fn dispatch_new(&mut self, registry: &RegistrySnapshot) -> Result<bool, TraceError> {
        let pharmacies: Vec<Dispatch> = registry
            .within_radius(self.req.origin, self.req.current_radius_km)
            .into_iter()
            .filter(|n| !self.req.enquired.contains_key(&n.pharmacy.id))
            .map(|n| Dispatch {
                pharmacy_id: n.pharmacy.id,
                distance_km: n.distance_km,
            })
            .collect();
        if pharmacies.is_empty() {
            return Ok(false);
        }
        let round = self.req.round;
        self.emit(RequestEventKind::Dispatched { round, pharmacies })?;
        Ok(true)
    }

    fn settle(&mut self, to: RequestState) -> Result<(), TraceError> {
        let from = self.req.state;
        self.emit(RequestEventKind::StateChanged { from, to })
    }

    /// Grows the radius until some pharmacy not yet enquired is covered, or the
    /// cap is reached, in which case the request settles.
    fn expand(&mut self, registry: &RegistrySnapshot) -> Result<(), TraceError> {
        loop {
            if self.req.at_cap() {
                let to = if self.req.has_partial() {
                    RequestState::FulfilledPartial
                } else {
                    RequestState::Exhausted
                };
                return self.settle(to);
            }
            let round = self.req.round + 1;
            let radius_km = self.req.config.radius_for_round(round);
            self.emit(RequestEventKind::RoundExpanded { round, radius_km })?;
            if self.dispatch_new(registry)? {
                return Ok(());
            }
        }
    }

    fn close_round(&mut self, registry: &RegistrySnapshot) -> Result<(), TraceError> {
        if self.req.has_partial() && !self.req.config.expand_past_partial {
            self.settle(RequestState::FulfilledPartial)
        } else {
            self.expand(registry)
        }
    }
}

/// Opens a request for a submitted prescription and dispatches it to every
/// registered pharmacy within the initial radius.
pub fn open_request(
    request_id: RequestId,
    prescription: &Prescription,
    origin: GeoPoint,
    config: RequestConfig,
    registry: &RegistrySnapshot,
    now: Timestamp,
) -> Result<(AvailabilityRequest, Transition), EngineError> {
    if prescription.status != PrescriptionStatus::Submitted {
        return Err(EngineError::NotSubmitted(prescription.id.clone()));
    }
    if prescription.lines.is_empty() {
        return Err(EngineError::EmptyPrescription(prescription.id.clone()));
    }
    config.validate()?;
    let opened = RequestEventKind::Opened {
        prescription_id: prescription.id.clone(),
        owner: prescription.patient_id.clone(),
        origin,
        medicine_ids: prescription.medicine_ids(),
        config,
    };
    let mut req = AvailabilityRequest::from_opened(request_id, now, &opened)?;
    let mut rec = Recorder::new(&mut req, now);
    rec.out.events.push(opened);
    if !rec.dispatch_new(registry)? {
        rec.expand(registry)?;
    }
    let out = rec.out;
    Ok((req, out))
}

/// Records a pharmacist's answer. A full answer settles the request; when every
/// pharmacy of the current round has answered with at least one partial and no
/// full answer, the round closes early.
pub fn record_response(
    req: &mut AvailabilityRequest,
    response: PharmacyResponse,
    registry: &RegistrySnapshot,
    now: Timestamp,
) -> Result<(ResponseOutcome, Transition), EngineError> {
    if response.request_id != req.id {
        return Err(EngineError::UnknownRequest(response.request_id));
    }
    if !req.enquired.contains_key(&response.pharmacy_id) {
        return Err(EngineError::UnknownPharmacy(response.pharmacy_id));
    }
    if req.has_answered(&response.pharmacy_id) {
        return Ok((ResponseOutcome::Duplicate, Transition::default()));
    }
    response.validate(&req.medicine_ids)?;
    let late = req.is_terminal();
    let mut rec = Recorder::new(req, now);
    rec.emit(RequestEventKind::ResponseRecorded { response })?;
    if !rec.req.is_terminal() {
        let round_done = rec
            .req
            .current_round()
            .dispatched
            .iter()
            .all(|p| rec.req.responses.contains_key(p));
        if round_done && rec.req.has_partial() {
            rec.close_round(registry)?;
        }
    }
    let outcome = if late {
        ResponseOutcome::Late
    } else {
        ResponseOutcome::Recorded
    };
    Ok((outcome, rec.out))
}

/// Advances the request to `now`: nothing happens before the round deadline or
/// on a settled request.
pub fn tick(
    req: &mut AvailabilityRequest,
    registry: &RegistrySnapshot,
    now: Timestamp,
) -> Result<Transition, EngineError> {
    if req.is_terminal() || now < req.round_deadline {
        return Ok(Transition::default());
    }
    let mut rec = Recorder::new(req, now);
    rec.close_round(registry)?;
    Ok(rec.out)
}

pub fn cancel(req: &mut AvailabilityRequest, now: Timestamp) -> Result<Transition, EngineError> {
    if req.is_terminal() {
        return Err(EngineError::InvalidTransition {
            action: "cancel",
            state: req.state,
        });
    }
    let mut rec = Recorder::new(req, now);
    rec.emit(RequestEventKind::Cancelled)?;
    Ok(rec.out)
}
