//! One function per fuzz target. Each must not panic on any input; where a
//! decoder has an inverse, accepted input must survive a round trip.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use pharmafind_core::auth::{parse_token_table, TokenTable};
use pharmafind_core::catalog::{format_catalog, load_catalog};
use pharmafind_core::clock::VirtualClock;
use pharmafind_core::geo::{format_pharmacy_seed, parse_pharmacy_seed, GeoRegistry};
use pharmafind_core::stats::{analyze, parse_contingency_fixture, parse_count_fixture};
use pharmafind_core::store::decode_log;
use pharmafind_core::{Broker, Seed};
use pharmafind_harness::scenario::{parse_offset, Scenario};
use pharmafind_server::{router, AppState};
use tower::ServiceExt;

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

pub fn catalog(data: &[u8]) {
    let Some(t) = text(data) else { return };
    let Ok(cat) = load_catalog(t) else { return };
    let again = load_catalog(&format_catalog(cat.medicines())).expect("formatted catalog parses");
    assert_eq!(again.medicines(), cat.medicines());
    for m in cat.medicines() {
        let hits = cat.autocomplete(&m.name, usize::MAX);
        assert!(hits.iter().any(|h| h.id == m.id), "{} not found by its own name", m.id);
        assert!(hits.windows(2).all(|w| (&w[0].name, &w[0].id) <= (&w[1].name, &w[1].id)));
    }
}

pub fn pharmacy_seed(data: &[u8]) {
    let Some(t) = text(data) else { return };
    let Ok(pharmacies) = parse_pharmacy_seed(t) else { return };
    let again = parse_pharmacy_seed(&format_pharmacy_seed(&pharmacies)).expect("formatted seed parses");
    assert_eq!(again, pharmacies);
    let reg = GeoRegistry::from_pharmacies(pharmacies.clone()).expect("parsed ids are unique");
    for p in pharmacies.iter().filter(|p| p.registered) {
        let hits = reg.within_radius(p.location, 0.0);
        assert!(hits.iter().any(|n| n.pharmacy.id == p.id), "{} not at its own location", p.id);
    }
}

pub fn token_table(data: &[u8]) {
    let Some(t) = text(data) else { return };
    let Ok(records) = parse_token_table(t) else { return };
    let table = TokenTable::new(&records);
    assert_eq!(table.len(), records.len(), "tokens are unique");
    for r in &records {
        let s = table.authenticate(&r.token).expect("every token authenticates");
        assert_eq!((s.principal.0.as_str(), s.role), (r.principal.as_str(), r.role));
    }
}

pub fn contingency_fixture(data: &[u8]) {
    let Some(t) = text(data) else { return };
    let Ok(fx) = parse_contingency_fixture(t) else { return };
    let Ok(results) = analyze(&fx) else { return };
    for r in results {
        assert!(r.result.statistic >= 0.0 && r.result.statistic.is_finite());
        assert!((0.0..=1.0).contains(&r.result.p_value));
    }
}

pub fn count_fixture(data: &[u8]) {
    let Some(t) = text(data) else { return };
    let Ok(fx) = parse_count_fixture(t) else { return };
    for q in fx.sections.iter().flat_map(|s| &s.questions) {
        let Ok(table) = q.tabulate() else { continue };
        assert_eq!(table.rows.len(), q.options.len());
        assert!(table.rows.iter().all(|r| r.percent.is_finite() && r.percent >= 0.0));
        assert_eq!(table.percent_strings().len(), q.options.len());
    }
}

pub fn scenario(data: &[u8]) {
    let Some(t) = text(data) else { return };
    let _ = parse_offset(t);
    // Catalog paths resolve against a directory that holds nothing.
    let _ = Scenario::parse(t, Path::new("/nonexistent"));
}

pub fn store_log(data: &[u8]) {
    let Ok(log) = decode_log(data) else { return };
    assert!(log.valid_len <= data.len());
    let mut encoded = Vec::new();
    for r in &log.records {
        serde_json::to_writer(&mut encoded, r).expect("records serialize");
        encoded.push(b'\n');
    }
    let again = decode_log(&encoded).expect("re-encoded log decodes");
    assert_eq!(again.records, log.records);
    assert_eq!(again.valid_len, encoded.len());
}

struct ApiWorld {
    runtime: tokio::runtime::Runtime,
    app: Router,
    _dir: tempfile::TempDir,
}

const ROUTES: [(Method, &str); 14] = [
    (Method::POST, "/prescriptions"),
    (Method::PUT, "/prescriptions/rx-2"),
    (Method::POST, "/prescriptions/rx-2/availability"),
    (Method::POST, "/requests/req-1/cancel"),
    (Method::POST, "/pharmacy/requests/req-1/response"),
    (Method::POST, "/notifications/read"),
    (Method::POST, "/admin/advance-clock"),
    (Method::GET, "/pharmacies/nearby?"),
    (Method::GET, "/medicines/autocomplete?"),
    (Method::GET, "/notifications?"),
    (Method::GET, "/admin/events?"),
    (Method::GET, "/requests/"),
    (Method::GET, "/prescriptions/"),
    (Method::DELETE, "/prescriptions/"),
];
const TOKENS: [Option<&str>; 4] = [None, Some("patient-alice"), Some("pharm-p01"), Some("patient-bruno")];

fn api_world() -> &'static ApiWorld {
    static WORLD: OnceLock<ApiWorld> = OnceLock::new();
    WORLD.get_or_init(|| {
        let seed = Seed {
            medicines: load_catalog(include_str!("../../fixtures/medicines.csv"))
                .expect("catalog fixture")
                .medicines()
                .to_vec(),
            pharmacies: parse_pharmacy_seed(include_str!("../../fixtures/pharmacies.csv")).expect("pharmacy fixture"),
            users: parse_token_table(include_str!("../../fixtures/tokens.csv")).expect("token fixture"),
        };
        let dir = tempfile::tempdir().expect("tempdir");
        let clock = Arc::new(VirtualClock::new(VirtualClock::epoch()));
        let broker = Arc::new(Broker::open(dir.path(), seed, clock.clone()).expect("broker"));
        let app = router(AppState::new(broker, Some(clock)));
        let runtime = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .expect("runtime");
        let w = ApiWorld { runtime, app, _dir: dir };
        // rx-1 goes out as req-1; rx-2 stays a draft for edits.
        let rx = r#"{"lines":[{"medicine_id":"M001","quantity":1}]}"#;
        let at = r#"{"lat":41.15,"lon":-8.61}"#;
        for (m, path, body) in [
            (Method::POST, "/prescriptions", rx),
            (Method::POST, "/prescriptions", rx),
            (Method::POST, "/prescriptions/rx-1/availability", at),
        ] {
            let status = w.send(m, path, Some("patient-alice"), body.as_bytes().to_vec());
            assert!(status.is_success(), "setup {path}: {status}");
        }
        w
    })
}

impl ApiWorld {
    fn send(&self, method: Method, uri: &str, token: Option<&str>, body: Vec<u8>) -> StatusCode {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let Ok(req) = req.header("content-type", "application/json").body(Body::from(body)) else {
            return StatusCode::BAD_REQUEST;
        };
        self.runtime
            .block_on(self.app.clone().oneshot(req))
            .expect("router is infallible")
            .status()
    }
}

/// First byte picks the endpoint and token; the rest is the body, or the
/// query string or path tail for GET and DELETE.
pub fn api_body(data: &[u8]) {
    let Some((&selector, rest)) = data.split_first() else { return };
    let world = api_world();
    let (method, path) = &ROUTES[selector as usize % ROUTES.len()];
    let token = TOKENS[(selector as usize / ROUTES.len()) % TOKENS.len()];
    let (uri, body) = if *method == Method::GET || *method == Method::DELETE {
        let Some(tail) = text(rest) else { return };
        (format!("{path}{tail}"), Vec::new())
    } else {
        (path.to_string(), rest.to_vec())
    };
    let status = world.send(method.clone(), &uri, token, body);
    assert!(!status.is_server_error(), "{method} {uri}: {status}");
}
