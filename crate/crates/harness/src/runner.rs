//! Drives a virtual-clock server through a scenario and writes the transcript.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Duration;

use chrono::{DateTime, Utc};
use pharmafind_core::engine::RequestEvent;
use pharmafind_core::store::format_event;
use pharmafind_core::PharmacyId;
use reqwest::blocking::Client;
use reqwest::Method;
use serde_json::{json, Value};
use thiserror::Error;

use crate::scenario::{parse_offset, Action, Answer, Expect, LineEntry, Scenario, Step};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("server at {url} is unreachable: {message}")]
    Unreachable { url: String, message: String },
    #[error("server at {url} does not expose the virtual clock; start it with --virtual-clock")]
    NoVirtualClock { url: String },
    #[error("{method} {path}: {message}")]
    Http {
        method: String,
        path: String,
        message: String,
    },
}

/// Result of one run. `transcript` is byte-identical across runs of the same
/// scenario against fresh servers.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub transcript: String,
    pub assertions: usize,
    pub failures: Vec<String>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

struct Runner<'a> {
    scenario: &'a Scenario,
    client: Client,
    base: String,
    out: String,
    start: DateTime<Utc>,
    elapsed: Duration,
    last_seq: u64,
    assertions: usize,
    failures: Vec<String>,
    last_prescription: Option<String>,
    last_request: Option<String>,
    /// Medicines of each prescription as last submitted or edited.
    prescription_medicines: BTreeMap<String, Vec<String>>,
    request_prescription: BTreeMap<String, String>,
    request_owner: BTreeMap<String, String>,
}

pub fn run(scenario: &Scenario, base_url: &str) -> Result<RunOutcome, RunError> {
    let client = Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .map_err(|e| RunError::Unreachable {
            url: base_url.to_owned(),
            message: e.to_string(),
        })?;
    let base = base_url.trim_end_matches('/').to_owned();
    client
        .get(format!("{base}/health"))
        .send()
        .and_then(|r| r.error_for_status())
        .map_err(|e| RunError::Unreachable {
            url: base.clone(),
            message: e.to_string(),
        })?;
    let mut runner = Runner {
        scenario,
        client,
        base,
        out: String::new(),
        start: DateTime::<Utc>::MIN_UTC,
        elapsed: Duration::ZERO,
        last_seq: 0,
        assertions: 0,
        failures: Vec::new(),
        last_prescription: None,
        last_request: None,
        prescription_medicines: BTreeMap::new(),
        request_prescription: BTreeMap::new(),
        request_owner: BTreeMap::new(),
    };
    runner.prologue()?;
    for (i, step) in scenario.steps.iter().enumerate() {
        runner.step(i + 1, step)?;
    }
    runner.epilogue();
    Ok(RunOutcome {
        transcript: runner.out,
        assertions: runner.assertions,
        failures: runner.failures,
    })
}

fn compact(v: &Value) -> String {
    if v.is_null() {
        String::new()
    } else {
        format!(" {v}")
    }
}

fn fmt_offset(d: Duration) -> String {
    humantime::format_duration(d).to_string()
}

fn sorted(v: &[String]) -> Vec<String> {
    let mut v = v.to_vec();
    v.sort();
    v
}

fn strings(v: &Value) -> Vec<String> {
    v.as_array()
        .map(|a| a.iter().filter_map(|x| x.as_str().map(str::to_owned)).collect())
        .unwrap_or_default()
}

impl Runner<'_> {
    fn token(&self, principal: &str) -> String {
        self.scenario
            .world
            .user(principal)
            .map(|u| u.token.clone())
            .unwrap_or_default()
    }

    /// One logged HTTP exchange.
    fn call(&mut self, method: Method, path: &str, token: Option<&str>, body: Option<Value>) -> Result<(u16, Value), RunError> {
        let _ = writeln!(self.out, "  > {method} {path}{}", body.as_ref().map(compact).unwrap_or_default());
        let mut req = self.client.request(method.clone(), format!("{}{path}", self.base));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = &body {
            req = req.json(b);
        }
        let err = |e: reqwest::Error| RunError::Http {
            method: method.to_string(),
            path: path.to_owned(),
            message: e.to_string(),
        };
        let resp = req.send().map_err(err)?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(err)?;
        let value = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap_or(Value::String(text))
        };
        let _ = writeln!(self.out, "  < {status}{}", compact(&value));
        Ok((status, value))
    }

    fn check(&mut self, what: String, ok: bool, detail: impl FnOnce() -> String) {
        self.assertions += 1;
        if ok {
            let _ = writeln!(self.out, "  check {what}: ok");
        } else {
            let d = detail();
            let _ = writeln!(self.out, "  check {what}: FAIL ({d})");
            self.failures.push(format!("{what}: {d}"));
        }
    }

    fn check_eq<T: PartialEq + std::fmt::Debug>(&mut self, what: &str, want: &T, got: &T) {
        let detail = format!("got {got:?}");
        self.check(format!("{what} = {want:?}"), want == got, || detail);
    }

    fn prologue(&mut self) -> Result<(), RunError> {
        let _ = writeln!(self.out, "scenario: {}", self.scenario.name);
        if !self.scenario.description.trim().is_empty() {
            for line in self.scenario.description.trim().lines() {
                let _ = writeln!(self.out, "  {}", line.trim());
            }
        }
        let w = &self.scenario.world;
        let _ = writeln!(
            self.out,
            "world: {} pharmacies, {} medicines, {} users",
            w.pharmacies.len(),
            w.medicines.len(),
            w.users.len()
        );
        let (status, clock) = self.call(Method::GET, "/admin/clock", None, None)?;
        if status != 200 || clock["virtual"] != true {
            return Err(RunError::NoVirtualClock { url: self.base.clone() });
        }
        self.start = clock["now"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RunError::Http {
                method: "GET".into(),
                path: "/admin/clock".into(),
                message: format!("unexpected body {clock}"),
            })?;
        // Events already in the log belong to earlier runs.
        let (_, events) = self.call(Method::GET, "/admin/events", None, None)?;
        self.last_seq = events
            .as_array()
            .and_then(|a| a.last())
            .and_then(|e| e["sequence"].as_u64())
            .unwrap_or(0);
        Ok(())
    }

    fn epilogue(&mut self) {
        let failed = self.failures.len();
        let _ = if failed == 0 {
            writeln!(self.out, "result: PASS ({} assertions)", self.assertions)
        } else {
            writeln!(self.out, "result: FAIL ({failed} of {} assertions failed)", self.assertions)
        };
    }

    fn advance_to(&mut self, at: Duration) -> Result<(), RunError> {
        if at > self.elapsed {
            let seconds = (at - self.elapsed).as_secs();
            self.call(Method::POST, "/admin/advance-clock", None, Some(json!({ "seconds": seconds })))?;
            self.elapsed = at;
        }
        Ok(())
    }

    fn drain_events(&mut self) -> Result<(), RunError> {
        let path = format!("/admin/events?since={}", self.last_seq);
        let (_, events) = self.call(Method::GET, &path, None, None)?;
        let parsed: Vec<RequestEvent> = serde_json::from_value(events.clone()).map_err(|e| RunError::Http {
            method: "GET".into(),
            path,
            message: format!("undecodable events: {e}"),
        })?;
        for ev in parsed {
            let _ = writeln!(self.out, "  event {}", format_event(&ev));
            self.last_seq = self.last_seq.max(ev.sequence);
        }
        Ok(())
    }

    fn lines_body(lines: &[LineEntry]) -> Value {
        json!({
            "lines": lines
                .iter()
                .map(|l| json!({ "medicine_id": l.medicine, "quantity": l.quantity }))
                .collect::<Vec<_>>()
        })
    }

    fn prescription_or_last(&self, named: &Option<String>) -> String {
        named.clone().or_else(|| self.last_prescription.clone()).unwrap_or_default()
    }

    fn request_of(&self, step: &Step) -> Option<String> {
        step.action.request().map(str::to_owned).or_else(|| self.last_request.clone())
    }

    /// Token of the patient who can read `request`.
    fn owner_token(&self, request: &str, step: &Step) -> Option<String> {
        let owner = self.request_owner.get(request).cloned().or_else(|| {
            let actor = step.actor.as_deref()?;
            let u = self.scenario.world.user(actor)?;
            (u.role == pharmafind_core::auth::Role::Patient).then(|| actor.to_owned())
        })?;
        Some(self.token(&owner))
    }

    fn record_prescription(&mut self, body: &Value) {
        if let Some(id) = body["id"].as_str() {
            let meds = body["lines"]
                .as_array()
                .map(|a| a.iter().filter_map(|l| l["medicine_id"].as_str().map(str::to_owned)).collect())
                .unwrap_or_default();
            self.prescription_medicines.insert(id.to_owned(), meds);
        }
    }

    fn perform(&mut self, step: &Step) -> Result<(u16, Value), RunError> {
        let actor = step.actor.clone().unwrap_or_default();
        let token = self.token(&actor);
        let t = Some(token.as_str());
        match &step.action {
            Action::SubmitPrescription { lines } => {
                let (s, v) = self.call(Method::POST, "/prescriptions", t, Some(Self::lines_body(lines)))?;
                if s == 201 {
                    self.record_prescription(&v);
                    self.last_prescription = v["id"].as_str().map(str::to_owned);
                }
                Ok((s, v))
            }
            Action::EditPrescription { prescription, lines } => {
                let id = self.prescription_or_last(prescription);
                let (s, v) = self.call(Method::PUT, &format!("/prescriptions/{id}"), t, Some(Self::lines_body(lines)))?;
                if s == 200 {
                    self.record_prescription(&v);
                }
                Ok((s, v))
            }
            Action::CancelPrescription { prescription } => {
                let id = self.prescription_or_last(prescription);
                self.call(Method::DELETE, &format!("/prescriptions/{id}"), t, None)
            }
            Action::RequestAvailability {
                prescription,
                lat,
                lon,
                config,
            } => {
                let id = self.prescription_or_last(prescription);
                let mut body = json!({ "lat": lat, "lon": lon });
                if let Some(c) = config {
                    body["config"] = c.clone();
                }
                let (s, v) = self.call(Method::POST, &format!("/prescriptions/{id}/availability"), t, Some(body))?;
                if s == 202 {
                    if let Some(req) = v["request_id"].as_str() {
                        self.last_request = Some(req.to_owned());
                        self.request_owner.insert(req.to_owned(), actor.clone());
                        self.request_prescription.insert(req.to_owned(), id);
                    }
                }
                Ok((s, v))
            }
            Action::Respond { answer, .. } => {
                let req = self.request_of(step).unwrap_or_default();
                let body = match answer {
                    Answer::Verdict(v) => json!({ "verdict": v }),
                    Answer::Available(ids) => json!({ "available_medicine_ids": ids }),
                    Answer::FromStock => {
                        let stock = self.scenario.world.stock.get(&PharmacyId::new(actor.clone()));
                        let wanted = self
                            .request_prescription
                            .get(&req)
                            .and_then(|rx| self.prescription_medicines.get(rx))
                            .cloned()
                            .unwrap_or_default();
                        let held: BTreeSet<String> = wanted
                            .into_iter()
                            .filter(|m| stock.is_some_and(|s| s.iter().any(|x| x.as_str() == m)))
                            .collect();
                        json!({ "available_medicine_ids": held })
                    }
                };
                self.call(Method::POST, &format!("/pharmacy/requests/{req}/response"), t, Some(body))
            }
            Action::CancelRequest { .. } => {
                let req = self.request_of(step).unwrap_or_default();
                self.call(Method::POST, &format!("/requests/{req}/cancel"), t, None)
            }
            Action::ReadNotifications => {
                let (_, list) = self.call(Method::GET, "/notifications?unread_only=true", t, None)?;
                let ids: Vec<u64> = list
                    .as_array()
                    .map(|a| a.iter().filter_map(|n| n["id"].as_u64()).collect())
                    .unwrap_or_default();
                self.call(Method::POST, "/notifications/read", t, Some(json!({ "ids": ids })))
            }
            Action::Check { .. } => Ok((200, Value::Null)),
        }
    }

    fn fetch_request(&mut self, step: &Step) -> Result<Option<(String, Value)>, RunError> {
        let Some(req) = self.request_of(step) else {
            return Ok(None);
        };
        let Some(token) = self.owner_token(&req, step) else {
            return Ok(None);
        };
        let (s, v) = self.call(Method::GET, &format!("/requests/{req}"), Some(&token), None)?;
        Ok((s == 200).then_some((token, v)))
    }

    fn step(&mut self, n: usize, step: &Step) -> Result<(), RunError> {
        let _ = writeln!(
            self.out,
            "\nstep {n} at +{} (line {}): {} {}",
            fmt_offset(step.at),
            step.line,
            step.actor.as_deref().unwrap_or("-"),
            step.action.name()
        );
        if let Some(note) = &step.note {
            let _ = writeln!(self.out, "  # {note}");
        }
        self.advance_to(step.at)?;
        let e = &step.expect;
        let before = if e.unchanged == Some(true) {
            self.fetch_request(step)?.map(|(_, v)| v)
        } else {
            None
        };

        let (status, body) = self.perform(step)?;
        self.drain_events()?;

        match e.status {
            Some(want) => self.check_eq("status", &want, &status),
            None if !matches!(step.action, Action::Check { .. }) => {
                self.check(format!("status {status} is 2xx"), (200..300).contains(&status), || {
                    format!("body {body}")
                })
            }
            None => {}
        }
        if let Some(code) = &e.error {
            let got = body["error"].as_str().unwrap_or("").to_owned();
            self.check_eq("error", code, &got);
        }
        self.request_expectations(step, before)?;
        if let Some(want) = e.inbox {
            let token = self.token(step.actor.as_deref().unwrap_or_default());
            let (_, inbox) = self.call(Method::GET, "/pharmacy/inbox", Some(&token), None)?;
            let got = inbox.as_array().map_or(0, Vec::len);
            self.check_eq("inbox size", &want, &got);
        }

        let (_, c) = self.call(Method::GET, "/admin/consistency", None, None)?;
        let consistent = c["consistent"] == true;
        self.check("replay from log matches live state".into(), consistent, || {
            format!("mismatches {}", c["mismatches"])
        });
        Ok(())
    }

    fn request_expectations(&mut self, step: &Step, before: Option<Value>) -> Result<(), RunError> {
        let e: &Expect = &step.expect;
        if !e.needs_request() {
            return Ok(());
        }
        let Some((owner, r)) = self.fetch_request(step)? else {
            let req = self.request_of(step).unwrap_or_default();
            self.check(format!("request {req} is readable"), false, || "not found".into());
            return Ok(());
        };
        if let Some(want) = &e.state {
            let got = r["state"].as_str().unwrap_or("").to_owned();
            self.check_eq("state", want, &got);
        }
        if let Some(want) = e.round {
            let got = r["round"].as_u64().unwrap_or(0) as u32;
            self.check_eq("round", &want, &got);
        }
        if let Some(want) = e.radius_km {
            let got = r["radius_km"].as_f64().unwrap_or(f64::NAN);
            self.check_eq("radius_km", &want, &got);
        }
        let latest = r["rounds"].as_array().and_then(|a| a.last()).cloned().unwrap_or(Value::Null);
        if let Some(want) = &e.dispatched {
            let got = sorted(&strings(&latest["dispatched"]));
            self.check_eq("dispatched in latest round", &sorted(want), &got);
        }
        if let Some(want) = &e.enquired {
            let got = r["enquired"]
                .as_array()
                .map(|a| a.iter().filter_map(|x| x["pharmacy_id"].as_str().map(str::to_owned)).collect::<Vec<_>>())
                .unwrap_or_default();
            self.check_eq("enquired", &sorted(want), &sorted(&got));
        }
        if let Some(offset) = &e.round_started_at {
            let want = self.start + parse_offset(offset).expect("validated when parsed");
            let got = latest["started_at"].as_str().and_then(|s| s.parse::<DateTime<Utc>>().ok());
            self.check_eq("latest round started at", &Some(want), &got);
        }
        if let Some(want) = &e.best_pharmacy {
            let got = r["best_pharmacy"]["pharmacy_id"].as_str().unwrap_or("").to_owned();
            self.check_eq("best pharmacy", want, &got);
        }
        if let Some(want) = e.late_responses {
            let got = r["late_responses"].as_array().map_or(0, Vec::len);
            self.check_eq("late responses", &want, &got);
        }
        if e.unchanged == Some(true) {
            let same = before.as_ref() == Some(&r);
            self.check("request unchanged".into(), same, || "request view differs".into());
        }
        if e.notifications.is_some() || e.notification_kinds.is_some() {
            let (_, list) = self.call(Method::GET, "/notifications", Some(&owner), None)?;
            let mut items: Vec<(u64, String)> = list
                .as_array()
                .map(|a| {
                    a.iter()
                        .map(|n| (n["id"].as_u64().unwrap_or(0), n["kind"].as_str().unwrap_or("").to_owned()))
                        .collect()
                })
                .unwrap_or_default();
            items.sort();
            if let Some(want) = e.notifications {
                self.check_eq("notifications", &want, &items.len());
            }
            if let Some(want) = &e.notification_kinds {
                let got: Vec<String> = items.into_iter().map(|(_, k)| k).collect();
                self.check_eq("notification kinds", want, &got);
            }
        }
        Ok(())
    }
}
