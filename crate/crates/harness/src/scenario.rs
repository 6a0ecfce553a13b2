//! Scenario files: a seeded world plus a time-ordered script of patient and
//! pharmacist actions with expectations. The format is TOML; see the README
//! for the schema.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Duration;

use pharmafind_core::auth::{Role, UserRecord};
use pharmafind_core::catalog::load_catalog;
use pharmafind_core::{GeoPoint, Medicine, MedicineId, Pharmacy, PharmacyId, Seed, Verdict};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

fn invalid(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        line,
        message: message.into(),
    }
}

// -- raw file shape ---------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    world: RawWorld,
    #[serde(default)]
    step: Vec<Spanned<RawStep>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorld {
    /// Medicine file to load, relative to the scenario file.
    catalog: Option<Spanned<String>>,
    #[serde(default)]
    medicine: Vec<Spanned<RawMedicine>>,
    #[serde(default)]
    pharmacy: Vec<Spanned<RawPharmacy>>,
    #[serde(default)]
    patient: Vec<Spanned<RawPatient>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMedicine {
    id: String,
    name: String,
    #[serde(default)]
    dosage: String,
    #[serde(default)]
    package: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPharmacy {
    id: String,
    name: Option<String>,
    lat: f64,
    lon: f64,
    #[serde(default)]
    contact: String,
    #[serde(default = "yes")]
    registered: bool,
    token: Option<String>,
    #[serde(default)]
    stock: Vec<String>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPatient {
    id: String,
    token: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    at: String,
    actor: Option<String>,
    action: String,
    #[serde(default)]
    params: toml::Table,
    #[serde(default)]
    expect: Expect,
    note: Option<String>,
}

// -- parsed form ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub world: World,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct World {
    pub medicines: Vec<Medicine>,
    pub pharmacies: Vec<Pharmacy>,
    pub users: Vec<UserRecord>,
    /// What each pharmacy holds; used by `respond` steps without an explicit answer.
    pub stock: BTreeMap<PharmacyId, BTreeSet<MedicineId>>,
}

impl World {
    pub fn seed(&self) -> Seed {
        Seed {
            pharmacies: self.pharmacies.clone(),
            medicines: self.medicines.clone(),
            users: self.users.clone(),
        }
    }

    pub fn user(&self, principal: &str) -> Option<&UserRecord> {
        self.users.iter().find(|u| u.principal == principal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Line of the step header in the scenario file.
    pub line: usize,
    /// Offset from scenario start.
    pub at: Duration,
    pub actor: Option<String>,
    pub action: Action,
    pub expect: Expect,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineEntry {
    pub medicine: String,
    #[serde(default = "one")]
    pub quantity: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    Verdict(Verdict),
    Available(Vec<String>),
    /// Whatever the pharmacy's declared stock covers.
    FromStock,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    SubmitPrescription {
        lines: Vec<LineEntry>,
    },
    EditPrescription {
        prescription: Option<String>,
        lines: Vec<LineEntry>,
    },
    CancelPrescription {
        prescription: Option<String>,
    },
    RequestAvailability {
        prescription: Option<String>,
        lat: f64,
        lon: f64,
        config: Option<serde_json::Value>,
    },
    Respond {
        request: Option<String>,
        answer: Answer,
    },
    CancelRequest {
        request: Option<String>,
    },
    ReadNotifications,
    Check {
        request: Option<String>,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::SubmitPrescription { .. } => "submit_prescription",
            Action::EditPrescription { .. } => "edit_prescription",
            Action::CancelPrescription { .. } => "cancel_prescription",
            Action::RequestAvailability { .. } => "request_availability",
            Action::Respond { .. } => "respond",
            Action::CancelRequest { .. } => "cancel_request",
            Action::ReadNotifications => "read_notifications",
            Action::Check { .. } => "check",
        }
    }

    /// Explicit request id, if the step names one.
    pub fn request(&self) -> Option<&str> {
        match self {
            Action::Respond { request, .. } | Action::CancelRequest { request } | Action::Check { request } => {
                request.as_deref()
            }
            _ => None,
        }
    }

    fn needs_role(&self) -> Option<Role> {
        match self {
            Action::Respond { .. } => Some(Role::Pharmacist),
            Action::Check { .. } => None,
            _ => Some(Role::Patient),
        }
    }
}

/// Assertions evaluated after a step. Request fields refer to the step's
/// request (the most recently opened one unless the step names another).
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    /// Exact HTTP status; without it any 2xx passes.
    pub status: Option<u16>,
    /// Error code in the response body.
    pub error: Option<String>,
    pub state: Option<String>,
    pub round: Option<u32>,
    pub radius_km: Option<f64>,
    /// Pharmacies dispatched in the latest round, in any order.
    pub dispatched: Option<Vec<String>>,
    /// Every pharmacy enquired so far, in any order.
    pub enquired: Option<Vec<String>>,
    /// Offset from scenario start at which the latest round began.
    pub round_started_at: Option<String>,
    pub best_pharmacy: Option<String>,
    pub late_responses: Option<usize>,
    /// The request is identical to what it was before the step.
    pub unchanged: Option<bool>,
    /// Number of notifications held for the request owner.
    pub notifications: Option<usize>,
    /// Kinds of those notifications, oldest first.
    pub notification_kinds: Option<Vec<String>>,
    /// Size of the acting pharmacy's inbox.
    pub inbox: Option<usize>,
}

impl Expect {
    pub fn needs_request(&self) -> bool {
        self.state.is_some()
            || self.round.is_some()
            || self.radius_km.is_some()
            || self.dispatched.is_some()
            || self.enquired.is_some()
            || self.round_started_at.is_some()
            || self.best_pharmacy.is_some()
            || self.late_responses.is_some()
            || self.unchanged == Some(true)
            || self.notifications.is_some()
            || self.notification_kinds.is_some()
    }
}

// -- parsing ----------------------------------------------------------------

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Parses an offset such as `0s`, `2m` or `1h 30m`.
pub fn parse_offset(s: &str) -> Result<Duration, String> {
    let d = humantime::parse_duration(s.trim()).map_err(|e| format!("bad time offset {s:?}: {e}"))?;
    if d.subsec_nanos() != 0 {
        return Err(format!("time offset {s:?} must be whole seconds"));
    }
    Ok(d)
}

fn params<T: DeserializeOwned>(table: toml::Table, line: usize, action: &str) -> Result<T, ScenarioError> {
    T::deserialize(toml::Value::Table(table)).map_err(|e| invalid(line, format!("{action} params: {}", e.message())))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinesParams {
    prescription: Option<String>,
    lines: Vec<LineEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PrescriptionParams {
    prescription: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AvailabilityParams {
    prescription: Option<String>,
    lat: f64,
    lon: f64,
    config: Option<toml::Table>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RespondParams {
    request: Option<String>,
    verdict: Option<Verdict>,
    available: Option<Vec<String>>,
    #[serde(default)]
    from_stock: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestParams {
    request: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

fn action(name: &str, table: toml::Table, line: usize) -> Result<Action, ScenarioError> {
    Ok(match name {
        "submit_prescription" => {
            let p: LinesParams = params(table, line, name)?;
            if p.prescription.is_some() {
                return Err(invalid(line, "submit_prescription takes no prescription id"));
            }
            Action::SubmitPrescription { lines: p.lines }
        }
        "edit_prescription" => {
            let p: LinesParams = params(table, line, name)?;
            Action::EditPrescription {
                prescription: p.prescription,
                lines: p.lines,
            }
        }
        "cancel_prescription" => {
            let p: PrescriptionParams = params(table, line, name)?;
            Action::CancelPrescription {
                prescription: p.prescription,
            }
        }
        "request_availability" => {
            let p: AvailabilityParams = params(table, line, name)?;
            let config = p
                .config
                .map(|t| serde_json::to_value(t).map_err(|e| invalid(line, e.to_string())))
                .transpose()?;
            Action::RequestAvailability {
                prescription: p.prescription,
                lat: p.lat,
                lon: p.lon,
                config,
            }
        }
        "respond" => {
            let p: RespondParams = params(table, line, name)?;
            let answer = match (p.verdict, p.available, p.from_stock) {
                (Some(v), None, false) => Answer::Verdict(v),
                (None, Some(ids), false) => Answer::Available(ids),
                (None, None, _) => Answer::FromStock,
                _ => {
                    return Err(invalid(
                        line,
                        "respond takes at most one of verdict, available or from_stock",
                    ))
                }
            };
            Action::Respond {
                request: p.request,
                answer,
            }
        }
        "cancel_request" => {
            let p: RequestParams = params(table, line, name)?;
            Action::CancelRequest { request: p.request }
        }
        "read_notifications" => {
            let _: NoParams = params(table, line, name)?;
            Action::ReadNotifications
        }
        "check" => {
            let p: RequestParams = params(table, line, name)?;
            Action::Check { request: p.request }
        }
        other => return Err(invalid(line, format!("unknown action {other:?}"))),
    })
}

impl Scenario {
    /// Reads a scenario file; a relative `catalog` path resolves against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ScenarioError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(1, |s| line_of(text, s.start));
            invalid(line, e.message().trim().to_owned())
        })?;
        let world = build_world(raw.world, text, base_dir)?;
        let steps = build_steps(raw.step, text, &world)?;
        Ok(Scenario {
            name: raw.name,
            description: raw.description,
            world,
            steps,
        })
    }
}

fn build_world(raw: RawWorld, text: &str, base_dir: &Path) -> Result<World, ScenarioError> {
    let mut world = World::default();
    let mut medicine_lines: HashMap<MedicineId, usize> = HashMap::new();

    if let Some(catalog) = raw.catalog {
        let line = line_of(text, catalog.span().start);
        let path = base_dir.join(catalog.get_ref());
        let content = std::fs::read_to_string(&path)
            .map_err(|e| invalid(line, format!("catalog {}: {e}", path.display())))?;
        let loaded = load_catalog(&content).map_err(|e| invalid(line, format!("catalog {}: {e}", path.display())))?;
        for m in loaded.medicines() {
            medicine_lines.insert(m.id.clone(), line);
            world.medicines.push(m.clone());
        }
    }
    for entry in raw.medicine {
        let line = line_of(text, entry.span().start);
        let entry = entry.into_inner();
        let m = Medicine {
            id: MedicineId::new(entry.id),
            name: entry.name,
            dosage: entry.dosage,
            package: entry.package,
        };
        m.validate().map_err(|e| invalid(line, format!("medicine {}: {e}", m.id)))?;
        if let Some(first) = medicine_lines.insert(m.id.clone(), line) {
            return Err(invalid(line, format!("medicine {} already declared on line {first}", m.id)));
        }
        world.medicines.push(m);
    }

    let mut actors: HashMap<String, usize> = HashMap::new();
    let mut tokens: HashMap<String, usize> = HashMap::new();
    let mut claim = |id: &str, token: &str, line: usize| -> Result<(), ScenarioError> {
        if let Some(first) = actors.insert(id.to_owned(), line) {
            return Err(invalid(line, format!("actor {id} already declared on line {first}")));
        }
        if let Some(first) = tokens.insert(token.to_owned(), line) {
            return Err(invalid(line, format!("token {token:?} already used on line {first}")));
        }
        Ok(())
    };

    for entry in raw.pharmacy {
        let line = line_of(text, entry.span().start);
        let entry = entry.into_inner();
        let location = GeoPoint::new(entry.lat, entry.lon).map_err(|e| invalid(line, format!("pharmacy {}: {e}", entry.id)))?;
        let token = entry.token.unwrap_or_else(|| format!("pharm-{}", entry.id.to_lowercase()));
        if entry.id.trim().is_empty() {
            return Err(invalid(line, "pharmacy id must not be empty"));
        }
        claim(&entry.id, &token, line)?;
        let mut stock = BTreeSet::new();
        for m in entry.stock {
            let id = MedicineId::new(m);
            if !medicine_lines.contains_key(&id) {
                return Err(invalid(line, format!("pharmacy {} stocks unknown medicine {id}", entry.id)));
            }
            stock.insert(id);
        }
        let id = PharmacyId::new(entry.id);
        world.stock.insert(id.clone(), stock);
        world.users.push(UserRecord {
            token,
            principal: id.as_str().to_owned(),
            role: Role::Pharmacist,
        });
        world.pharmacies.push(Pharmacy {
            name: entry.name.unwrap_or_else(|| id.as_str().to_owned()),
            id,
            location,
            contact: entry.contact,
            registered: entry.registered,
        });
    }
    for entry in raw.patient {
        let line = line_of(text, entry.span().start);
        let entry = entry.into_inner();
        if entry.id.trim().is_empty() {
            return Err(invalid(line, "patient id must not be empty"));
        }
        let token = entry.token.unwrap_or_else(|| format!("patient-{}", entry.id));
        claim(&entry.id, &token, line)?;
        world.users.push(UserRecord {
            token,
            principal: entry.id,
            role: Role::Patient,
        });
    }
    Ok(world)
}

fn build_steps(raw: Vec<Spanned<RawStep>>, text: &str, world: &World) -> Result<Vec<Step>, ScenarioError> {
    let mut steps = Vec::with_capacity(raw.len());
    let mut previous = Duration::ZERO;
    let mut have_prescription = false;
    let mut have_request = false;
    for spanned in raw {
        let line = line_of(text, spanned.span().start);
        let r = spanned.into_inner();
        let at = parse_offset(&r.at).map_err(|m| invalid(line, m))?;
        if at < previous {
            return Err(invalid(
                line,
                format!("step at {} comes before the previous step", r.at),
            ));
        }
        previous = at;
        let action = action(&r.action, r.params, line)?;

        let role = match &r.actor {
            Some(a) => Some(
                world
                    .user(a)
                    .ok_or_else(|| invalid(line, format!("actor {a:?} is not declared in the world")))?
                    .role,
            ),
            None => None,
        };
        match (action.needs_role(), role) {
            (Some(need), Some(have)) if need != have => {
                return Err(invalid(line, format!("{} must be performed by a {need:?} actor", action.name()).to_lowercase()))
            }
            (Some(_), None) => return Err(invalid(line, format!("{} needs an actor", action.name()))),
            _ => {}
        }
        if r.expect.inbox.is_some() && role != Some(Role::Pharmacist) {
            return Err(invalid(line, "expect.inbox needs a pharmacist actor"));
        }
        if let Some(offset) = &r.expect.round_started_at {
            parse_offset(offset).map_err(|m| invalid(line, m))?;
        }

        let names_prescription = matches!(
            &action,
            Action::EditPrescription { prescription: Some(_), .. }
                | Action::CancelPrescription { prescription: Some(_) }
                | Action::RequestAvailability { prescription: Some(_), .. }
        );
        let uses_prescription = matches!(
            &action,
            Action::EditPrescription { .. } | Action::CancelPrescription { .. } | Action::RequestAvailability { .. }
        );
        if uses_prescription && !names_prescription && !have_prescription {
            return Err(invalid(line, format!("{} before any prescription was submitted", action.name())));
        }
        let uses_request = matches!(&action, Action::Respond { .. } | Action::CancelRequest { .. })
            || r.expect.needs_request();
        let opens = matches!(action, Action::RequestAvailability { .. });
        if uses_request && !opens && action.request().is_none() && !have_request {
            return Err(invalid(line, format!("{} refers to a request before any was opened", action.name())));
        }
        have_prescription |= matches!(action, Action::SubmitPrescription { .. });
        have_request |= opens;

        steps.push(Step {
            line,
            at,
            actor: r.actor,
            action,
            expect: r.expect,
            note: r.note,
        });
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    const WORLD: &str = r#"
name = "t"

[[world.medicine]]
id = "M1"
name = "Aspirin"

[[world.pharmacy]]
id = "P1"
lat = 41.0
lon = -8.0
stock = ["M1"]

[[world.patient]]
id = "ana"
"#;

    fn parse(extra: &str) -> Result<Scenario, ScenarioError> {
        Scenario::parse(&format!("{WORLD}{extra}"), Path::new("."))
    }

    fn err_line(extra: &str) -> (usize, String) {
        match parse(extra).unwrap_err() {
            ScenarioError::Invalid { line, message } => (line, message),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn defaults_fill_tokens_and_names() {
        let s = parse("").unwrap();
        assert_eq!(s.world.pharmacies[0].name, "P1");
        assert!(s.world.pharmacies[0].registered);
        assert_eq!(s.world.user("P1").unwrap().token, "pharm-p1");
        assert_eq!(s.world.user("ana").unwrap().token, "patient-ana");
        assert_eq!(s.world.stock[&PharmacyId::new("P1")].len(), 1);
    }

    #[test]
    fn offsets() {
        assert_eq!(parse_offset("0s").unwrap(), Duration::ZERO);
        assert_eq!(parse_offset("2m").unwrap(), Duration::from_secs(120));
        assert_eq!(parse_offset("1h 30m").unwrap(), Duration::from_secs(5400));
        assert!(parse_offset("soon").is_err());
        assert!(parse_offset("1500ms").is_err());
    }

    #[test]
    fn steps_parse_into_actions() {
        let s = parse(
            r#"
[[step]]
at = "0s"
actor = "ana"
action = "submit_prescription"
params = { lines = [{ medicine = "M1" }] }

[[step]]
at = "0s"
actor = "ana"
action = "request_availability"
params = { lat = 41.0, lon = -8.0, config = { initial_radius_km = 2.0 } }
expect = { status = 202, state = "open" }

[[step]]
at = "2m"
actor = "P1"
action = "respond"
"#,
        )
        .unwrap();
        assert_eq!(s.steps.len(), 3);
        assert_eq!(s.steps[0].line, 17);
        assert_eq!(
            s.steps[0].action,
            Action::SubmitPrescription {
                lines: vec![LineEntry { medicine: "M1".into(), quantity: 1 }]
            }
        );
        match &s.steps[1].action {
            Action::RequestAvailability { config: Some(c), .. } => assert_eq!(c["initial_radius_km"], 2.0),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.steps[2].at, Duration::from_secs(120));
        assert_eq!(
            s.steps[2].action,
            Action::Respond {
                request: None,
                answer: Answer::FromStock
            }
        );
    }

    #[test]
    fn errors_carry_line_numbers() {
        let (line, msg) = err_line("\n[[step]]\nat = \"0s\"\nactor = \"zoe\"\naction = \"check\"\n");
        assert_eq!(line, 17);
        assert!(msg.contains("zoe"), "{msg}");

        let (line, msg) = err_line("\n[[step]]\nat = \"5m\"\naction = \"check\"\n\n[[step]]\nat = \"1m\"\naction = \"check\"\n");
        assert_eq!(line, 21);
        assert!(msg.contains("before the previous"), "{msg}");

        let (line, msg) = err_line("\n[[step]]\nat = \"0s\"\nactor = \"P1\"\naction = \"submit_prescription\"\nparams = { lines = [] }\n");
        assert_eq!(line, 17);
        assert!(msg.contains("patient"), "{msg}");

        let (line, _) = err_line("\n[[step]]\nat = \"0s\"\nactor = \"ana\"\naction = \"dance\"\n");
        assert_eq!(line, 17);

        let (line, msg) = err_line("\n[[step]]\nat = \"0s\"\nactor = \"P1\"\naction = \"respond\"\n");
        assert_eq!(line, 17);
        assert!(msg.contains("before any was opened"), "{msg}");

        let (line, _) = err_line("\n[[step]]\nat = \"0s\"\nbogus = 1\n");
        assert_eq!(line, 19);
    }

    #[test]
    fn world_validation() {
        let bad_lat = "name = \"x\"\n\n[[world.pharmacy]]\nid = \"P9\"\nlat = 91.0\nlon = 0.0\n";
        match Scenario::parse(bad_lat, Path::new(".")).unwrap_err() {
            ScenarioError::Invalid { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("P9") && message.contains("91"), "{message}");
            }
            e => panic!("{e}"),
        }
        let dup = format!("{WORLD}\n[[world.patient]]\nid = \"P1\"\n");
        assert!(Scenario::parse(&dup, Path::new(".")).unwrap_err().to_string().contains("already declared"));
        let stock = "name = \"x\"\n[[world.pharmacy]]\nid = \"P1\"\nlat = 0.0\nlon = 0.0\nstock = [\"M7\"]\n";
        assert!(Scenario::parse(stock, Path::new(".")).unwrap_err().to_string().contains("unknown medicine"));
        let syntax = "name = \"x\"\n\n[world\n";
        match Scenario::parse(syntax, Path::new(".")).unwrap_err() {
            ScenarioError::Invalid { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
    }
}
