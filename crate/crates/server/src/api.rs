//! Routes and handlers.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::stream::{self, Stream};
use pharmafind_core::notifier::{Notification, NotificationId};
use pharmafind_core::{
    Broker, BrokerError, ConfigOverrides, MedicineId, PrescriptionId, PrescriptionLine, RequestId,
    ResponseForm, Verdict,
};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast;

use crate::error::ApiError;
use crate::extract::{Body, Params, Patient, Pharmacist, Session};
use crate::views::{InboxItem, OpenedView, PrescriptionView, RequestView, ResponseAck};
use crate::AppState;

pub fn router(state: AppState) -> Router {
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/prescriptions", post(submit_prescription).get(list_prescriptions))
        .route(
            "/prescriptions/{id}",
            get(get_prescription).put(edit_prescription).delete(cancel_prescription),
        )
        .route("/prescriptions/{id}/availability", post(request_availability))
        .route("/requests", get(list_requests))
        .route("/requests/{id}", get(get_request))
        .route("/requests/{id}/cancel", post(cancel_request))
        .route("/pharmacies/nearby", get(nearby))
        .route("/medicines/autocomplete", get(autocomplete))
        .route("/pharmacy/inbox", get(inbox))
        .route("/pharmacy/requests/{id}/response", post(respond))
        .route("/notifications", get(notifications))
        .route("/notifications/read", post(mark_read))
        .route("/notifications/stream", get(notification_stream));
    if state.virtual_clock.is_some() {
        app = app
            .route("/admin/advance-clock", post(advance_clock))
            .route("/admin/clock", get(clock))
            .route("/admin/events", get(events))
            .route("/admin/consistency", get(consistency));
    }
    app.fallback(|| async { ApiError::NotFound("no such endpoint".into()) })
        .with_state(state)
}

/// Runs a broker call off the async executor; mutations fsync the log.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Broker) -> Result<T, BrokerError> + Send + 'static,
{
    let broker = state.broker.clone();
    tokio::task::spawn_blocking(move || f(&broker))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(ApiError::from)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

// -- prescriptions ----------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinesBody {
    lines: Vec<PrescriptionLine>,
}

async fn submit_prescription(
    State(state): State<AppState>,
    Patient(user): Patient,
    Body(body): Body<LinesBody>,
) -> Result<impl IntoResponse, ApiError> {
    let p = blocking(&state, move |b| b.submit_prescription(&user, body.lines)).await?;
    Ok((StatusCode::CREATED, Json(PrescriptionView::new(&state.broker, &p))))
}

async fn list_prescriptions(
    State(state): State<AppState>,
    Patient(user): Patient,
) -> Json<Vec<PrescriptionView>> {
    let b = &state.broker;
    Json(b.prescriptions_of(&user).iter().map(|p| PrescriptionView::new(b, p)).collect())
}

async fn get_prescription(
    State(state): State<AppState>,
    Patient(user): Patient,
    Path(id): Path<PrescriptionId>,
) -> Result<Json<PrescriptionView>, ApiError> {
    let p = state.broker.prescription(&user, &id)?;
    Ok(Json(PrescriptionView::new(&state.broker, &p)))
}

async fn edit_prescription(
    State(state): State<AppState>,
    Patient(user): Patient,
    Path(id): Path<PrescriptionId>,
    Body(body): Body<LinesBody>,
) -> Result<Json<PrescriptionView>, ApiError> {
    let p = blocking(&state, move |b| b.edit_prescription(&user, &id, body.lines)).await?;
    Ok(Json(PrescriptionView::new(&state.broker, &p)))
}

async fn cancel_prescription(
    State(state): State<AppState>,
    Patient(user): Patient,
    Path(id): Path<PrescriptionId>,
) -> Result<Json<PrescriptionView>, ApiError> {
    let p = blocking(&state, move |b| b.cancel_prescription(&user, &id)).await?;
    Ok(Json(PrescriptionView::new(&state.broker, &p)))
}

// -- availability requests --------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AvailabilityBody {
    lat: f64,
    lon: f64,
    #[serde(default)]
    config: ConfigOverrides,
}

async fn request_availability(
    State(state): State<AppState>,
    Patient(user): Patient,
    Path(id): Path<PrescriptionId>,
    Body(body): Body<AvailabilityBody>,
) -> Result<impl IntoResponse, ApiError> {
    let (req, _) = blocking(&state, move |b| {
        b.request_availability(&user, &id, body.lat, body.lon, &body.config)
    })
    .await?;
    Ok((StatusCode::ACCEPTED, Json(OpenedView::new(&state.broker, &req))))
}

async fn list_requests(State(state): State<AppState>, Patient(user): Patient) -> Json<Vec<RequestView>> {
    let b = &state.broker;
    Json(b.requests_of(&user).iter().map(|r| RequestView::new(b, r)).collect())
}

async fn get_request(
    State(state): State<AppState>,
    Patient(user): Patient,
    Path(id): Path<RequestId>,
) -> Result<Json<RequestView>, ApiError> {
    let req = state.broker.request(&user, &id)?;
    Ok(Json(RequestView::new(&state.broker, &req)))
}

async fn cancel_request(
    State(state): State<AppState>,
    Patient(user): Patient,
    Path(id): Path<RequestId>,
) -> Result<Json<RequestView>, ApiError> {
    let req = blocking(&state, move |b| b.cancel_request(&user, &id)).await?;
    Ok(Json(RequestView::new(&state.broker, &req)))
}

// -- map and catalog --------------------------------------------------------

#[derive(Debug, Deserialize)]
struct NearbyQuery {
    lat: f64,
    lon: f64,
    radius_km: Option<f64>,
}

const DEFAULT_NEARBY_RADIUS_KM: f64 = 5.0;

async fn nearby(
    State(state): State<AppState>,
    Params(q): Params<NearbyQuery>,
) -> Result<impl IntoResponse, ApiError> {
    let radius = q.radius_km.unwrap_or(DEFAULT_NEARBY_RADIUS_KM);
    Ok(Json(state.broker.nearby(q.lat, q.lon, radius)?))
}

#[derive(Debug, Deserialize)]
struct AutocompleteQuery {
    #[serde(default)]
    q: String,
    limit: Option<usize>,
}

const DEFAULT_AUTOCOMPLETE_LIMIT: usize = 10;

async fn autocomplete(
    State(state): State<AppState>,
    Params(q): Params<AutocompleteQuery>,
) -> impl IntoResponse {
    Json(
        state
            .broker
            .autocomplete(&q.q, q.limit.unwrap_or(DEFAULT_AUTOCOMPLETE_LIMIT)),
    )
}

// -- pharmacist -------------------------------------------------------------

async fn inbox(State(state): State<AppState>, Pharmacist(pharmacy): Pharmacist) -> Json<Vec<InboxItem>> {
    let b = &state.broker;
    Json(
        b.pharmacy_inbox(&pharmacy)
            .iter()
            .map(|(r, p)| InboxItem::new(b, &pharmacy, r, p))
            .collect(),
    )
}

/// Either a quick button (`{"verdict": "full" | "none"}`) or the checkbox
/// selection (`{"available_medicine_ids": [...]}`).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseBody {
    verdict: Option<Verdict>,
    available_medicine_ids: Option<Vec<MedicineId>>,
}

impl ResponseBody {
    fn into_form(self) -> Result<ResponseForm, ApiError> {
        match (self.verdict, self.available_medicine_ids) {
            (Some(Verdict::Partial), None) => Err(ApiError::BadRequest(
                "a partial answer must list available_medicine_ids".into(),
            )),
            (Some(v), None) => Ok(ResponseForm::Quick(v)),
            (None, Some(ids)) => Ok(ResponseForm::Available(ids)),
            _ => Err(ApiError::BadRequest(
                "body must contain exactly one of verdict or available_medicine_ids".into(),
            )),
        }
    }
}

async fn respond(
    State(state): State<AppState>,
    Pharmacist(pharmacy): Pharmacist,
    Path(id): Path<RequestId>,
    Body(body): Body<ResponseBody>,
) -> Result<Json<ResponseAck>, ApiError> {
    let form = body.into_form()?;
    let (req, response) = blocking(&state, move |b| b.respond(&pharmacy, &id, form)).await?;
    Ok(Json(ResponseAck {
        request_id: req.id,
        pharmacy_id: response.pharmacy_id,
        verdict: response.verdict,
        available_medicine_ids: response.available_medicine_ids,
        request_state: req.state,
    }))
}

// -- notifications ----------------------------------------------------------

#[derive(Debug, Deserialize)]
struct NotificationQuery {
    #[serde(default)]
    unread_only: bool,
}

async fn notifications(
    State(state): State<AppState>,
    Session(s): Session,
    Params(q): Params<NotificationQuery>,
) -> Json<Vec<Notification>> {
    Json(state.broker.notifications(&s.principal, q.unread_only))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReadBody {
    ids: Vec<NotificationId>,
}

async fn mark_read(
    State(state): State<AppState>,
    Session(s): Session,
    Body(body): Body<ReadBody>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let updated = state.broker.mark_read(&s.principal, &body.ids)?;
    Ok(Json(json!({ "updated": updated })))
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    last_id: Option<NotificationId>,
}

struct StreamState {
    broker: Arc<Broker>,
    user: pharmafind_core::UserId,
    live: broadcast::Receiver<Notification>,
    pending: std::collections::VecDeque<Notification>,
    last: NotificationId,
}

/// Server-sent events: the inbox after the last seen id first, then live
/// notifications. A lagging subscriber re-reads the inbox, so delivery is
/// at-least-once and clients dedupe by id.
async fn notification_stream(
    State(state): State<AppState>,
    Session(s): Session,
    headers: HeaderMap,
    Params(q): Params<StreamQuery>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let from_header = match headers.get("last-event-id") {
        Some(v) => Some(
            v.to_str()
                .ok()
                .and_then(|s| s.trim().parse::<NotificationId>().ok())
                .ok_or_else(|| ApiError::BadRequest("Last-Event-ID must be a notification id".into()))?,
        ),
        None => None,
    };
    let last = from_header.or(q.last_id).unwrap_or(0);
    // Subscribe before reading the backlog so nothing falls in between.
    let live = state.broker.notifier().subscribe();
    let pending = state.broker.notifications_since(&s.principal, last).into();
    let init = StreamState {
        broker: state.broker.clone(),
        user: s.principal,
        live,
        pending,
        last,
    };
    let events = stream::unfold(init, |mut st| async move {
        loop {
            if let Some(n) = st.pending.pop_front() {
                if n.id <= st.last {
                    continue;
                }
                st.last = n.id;
                let event = Event::default()
                    .event("notification")
                    .id(n.id.to_string())
                    .json_data(&n)
                    .expect("notifications serialize");
                return Some((Ok(event), st));
            }
            match st.live.recv().await {
                Ok(n) if n.user_id == st.user => st.pending.push_back(n),
                Ok(_) => {}
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    st.pending = st.broker.notifications_since(&st.user, st.last).into();
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::new().interval(state.heartbeat).text("heartbeat")))
}

// -- admin (virtual clock only) ---------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdvanceBody {
    seconds: i64,
}

async fn advance_clock(
    State(state): State<AppState>,
    Body(body): Body<AdvanceBody>,
) -> Result<Json<serde_json::Value>, ApiError> {
    if body.seconds < 0 {
        return Err(ApiError::BadRequest("seconds must not be negative".into()));
    }
    let clock = state.virtual_clock.clone().expect("admin routes need a virtual clock");
    let by = chrono::Duration::try_seconds(body.seconds)
        .filter(|by| state.broker.now().checked_add_signed(*by).is_some())
        .ok_or_else(|| ApiError::BadRequest(format!("cannot advance the clock by {} seconds", body.seconds)))?;
    let (now, changed) = blocking(&state, move |b| crate::advance_virtual_clock(b, &clock, by)).await?;
    Ok(Json(json!({ "now": now, "changed": changed })))
}

async fn clock(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "now": state.broker.now(), "virtual": state.virtual_clock.is_some() }))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: u64,
}

async fn events(State(state): State<AppState>, Params(q): Params<EventsQuery>) -> impl IntoResponse {
    Json(state.broker.events_since(q.since))
}

async fn consistency(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let mismatches = state.broker.replay_mismatches()?;
    Ok(Json(json!({ "consistent": mismatches.is_empty(), "mismatches": mismatches })))
}
