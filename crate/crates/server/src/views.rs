//! JSON shapes returned by the API. Field names are lower_snake_case and
//! timestamps are RFC 3339 UTC strings.

use std::collections::BTreeSet;

use pharmafind_core::engine::RequestConfig;
use pharmafind_core::{
    AvailabilityRequest, Broker, GeoPoint, MedicineId, PharmacyId, Prescription, PrescriptionId,
    RequestId, RequestState, UserId, Verdict,
};
use pharmafind_core::domain::{PrescriptionStatus, Timestamp};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct LineView {
    pub medicine_id: MedicineId,
    pub name: String,
    pub dosage: String,
    pub package: String,
    pub quantity: u32,
}

#[derive(Debug, Serialize)]
pub struct PrescriptionView {
    pub id: PrescriptionId,
    pub patient_id: UserId,
    pub status: PrescriptionStatus,
    pub lines: Vec<LineView>,
}

fn lines(broker: &Broker, p: &Prescription) -> Vec<LineView> {
    p.lines
        .iter()
        .map(|l| {
            let m = broker.catalog().get(&l.medicine_id);
            LineView {
                medicine_id: l.medicine_id.clone(),
                name: m.map(|m| m.name.clone()).unwrap_or_default(),
                dosage: m.map(|m| m.dosage.clone()).unwrap_or_default(),
                package: m.map(|m| m.package.clone()).unwrap_or_default(),
                quantity: l.quantity,
            }
        })
        .collect()
}

impl PrescriptionView {
    pub fn new(broker: &Broker, p: &Prescription) -> Self {
        Self {
            id: p.id.clone(),
            patient_id: p.patient_id.clone(),
            status: p.status,
            lines: lines(broker, p),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct PharmacySummary {
    pub pharmacy_id: PharmacyId,
    pub name: String,
    pub contact: String,
    pub location: Option<GeoPoint>,
    pub distance_km: f64,
}

/// Reply to opening an availability request.
#[derive(Debug, Serialize)]
pub struct OpenedView {
    pub request_id: RequestId,
    pub prescription_id: PrescriptionId,
    pub state: RequestState,
    pub round: u32,
    pub radius_km: f64,
    pub round_deadline: Option<Timestamp>,
    pub enquired: Vec<PharmacySummary>,
}

impl OpenedView {
    pub fn new(broker: &Broker, req: &AvailabilityRequest) -> Self {
        let snapshot = broker.registry().snapshot();
        let enquired = req
            .rounds
            .iter()
            .flat_map(|r| r.dispatched.iter())
            .map(|id| {
                let p = snapshot.get(id);
                PharmacySummary {
                    pharmacy_id: id.clone(),
                    name: p.map(|p| p.name.clone()).unwrap_or_default(),
                    contact: p.map(|p| p.contact.clone()).unwrap_or_default(),
                    location: p.map(|p| p.location),
                    distance_km: req.enquired[id].distance_km,
                }
            })
            .collect();
        Self {
            request_id: req.id.clone(),
            prescription_id: req.prescription_id.clone(),
            state: req.state,
            round: req.round,
            radius_km: req.current_radius_km,
            round_deadline: deadline(req),
            enquired,
        }
    }
}

fn deadline(req: &AvailabilityRequest) -> Option<Timestamp> {
    (!req.is_terminal()).then_some(req.round_deadline)
}

#[derive(Debug, Serialize)]
pub struct EnquiryView {
    pub pharmacy_id: PharmacyId,
    pub name: String,
    pub location: Option<GeoPoint>,
    pub distance_km: f64,
    pub round: u32,
    /// `no_response_yet` or the verdict of the pharmacy's answer.
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub available_medicine_ids: Option<BTreeSet<MedicineId>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub responded_at: Option<Timestamp>,
}

#[derive(Debug, Serialize)]
pub struct RoundView {
    pub round: u32,
    pub radius_km: f64,
    pub started_at: Timestamp,
    pub dispatched: Vec<PharmacyId>,
}

#[derive(Debug, Serialize)]
pub struct BestView {
    pub pharmacy_id: PharmacyId,
    pub name: String,
    pub verdict: Verdict,
    pub distance_km: f64,
}

#[derive(Debug, Serialize)]
pub struct LateView {
    pub pharmacy_id: PharmacyId,
    pub verdict: Verdict,
    pub responded_at: Timestamp,
}

#[derive(Debug, Serialize)]
pub struct RequestView {
    pub request_id: RequestId,
    pub prescription_id: PrescriptionId,
    pub owner: UserId,
    pub state: RequestState,
    pub round: u32,
    pub radius_km: f64,
    pub origin: GeoPoint,
    pub medicine_ids: BTreeSet<MedicineId>,
    pub config: RequestConfig,
    pub opened_at: Timestamp,
    pub updated_at: Timestamp,
    pub round_deadline: Option<Timestamp>,
    pub rounds: Vec<RoundView>,
    pub enquired: Vec<EnquiryView>,
    pub best_pharmacy: Option<BestView>,
    pub late_responses: Vec<LateView>,
}

fn verdict_str(v: Verdict) -> &'static str {
    match v {
        Verdict::Full => "full",
        Verdict::Partial => "partial",
        Verdict::None => "none",
    }
}

impl RequestView {
    pub fn new(broker: &Broker, req: &AvailabilityRequest) -> Self {
        let snapshot = broker.registry().snapshot();
        let name = |id: &PharmacyId| snapshot.get(id).map(|p| p.name.clone()).unwrap_or_default();
        let enquired = req
            .rounds
            .iter()
            .flat_map(|r| r.dispatched.iter())
            .map(|id| {
                let e = &req.enquired[id];
                let answer = req.responses.get(id);
                EnquiryView {
                    pharmacy_id: id.clone(),
                    name: name(id),
                    location: snapshot.get(id).map(|p| p.location),
                    distance_km: e.distance_km,
                    round: e.round,
                    status: answer.map_or("no_response_yet", |r| verdict_str(r.verdict)),
                    available_medicine_ids: answer.map(|r| r.available_medicine_ids.clone()),
                    responded_at: answer.map(|r| r.responded_at),
                }
            })
            .collect();
        Self {
            request_id: req.id.clone(),
            prescription_id: req.prescription_id.clone(),
            owner: req.owner.clone(),
            state: req.state,
            round: req.round,
            radius_km: req.current_radius_km,
            origin: req.origin,
            medicine_ids: req.medicine_ids.clone(),
            config: req.config,
            opened_at: req.opened_at,
            updated_at: req.updated_at,
            round_deadline: deadline(req),
            rounds: req
                .rounds
                .iter()
                .map(|r| RoundView {
                    round: r.round,
                    radius_km: r.radius_km,
                    started_at: r.started_at,
                    dispatched: r.dispatched.clone(),
                })
                .collect(),
            enquired,
            best_pharmacy: req.best_pharmacy().map(|b| BestView {
                name: name(&b.pharmacy_id),
                pharmacy_id: b.pharmacy_id,
                verdict: b.verdict,
                distance_km: b.distance_km,
            }),
            late_responses: req
                .late_responses
                .iter()
                .map(|r| LateView {
                    pharmacy_id: r.pharmacy_id.clone(),
                    verdict: r.verdict,
                    responded_at: r.responded_at,
                })
                .collect(),
        }
    }
}

/// An open request as a pharmacist sees it.
#[derive(Debug, Serialize)]
pub struct InboxItem {
    pub request_id: RequestId,
    pub prescription_id: PrescriptionId,
    pub state: RequestState,
    pub round: u32,
    pub enquired_in_round: u32,
    pub distance_km: f64,
    pub opened_at: Timestamp,
    pub round_deadline: Option<Timestamp>,
    pub lines: Vec<LineView>,
}

impl InboxItem {
    pub fn new(broker: &Broker, pharmacy: &PharmacyId, req: &AvailabilityRequest, p: &Prescription) -> Self {
        let e = &req.enquired[pharmacy];
        Self {
            request_id: req.id.clone(),
            prescription_id: req.prescription_id.clone(),
            state: req.state,
            round: req.round,
            enquired_in_round: e.round,
            distance_km: e.distance_km,
            opened_at: req.opened_at,
            round_deadline: deadline(req),
            lines: lines(broker, p),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ResponseAck {
    pub request_id: RequestId,
    pub pharmacy_id: PharmacyId,
    pub verdict: Verdict,
    pub available_medicine_ids: BTreeSet<MedicineId>,
    pub request_state: RequestState,
}
