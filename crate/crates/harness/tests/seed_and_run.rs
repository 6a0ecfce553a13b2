use std::path::Path;

use pharmafind_harness::scenario::Scenario;
use pharmafind_harness::{run, run_embedded, seed, EmbeddedServer, RunError, SeedError};

const FIVE_AND_TWENTY: &str = r#"
name = "five pharmacies"

[world]
catalog = "../../../fixtures/medicines.csv"

[[world.patient]]
id = "rui"

[[world.pharmacy]]
id = "A"
lat = 41.150
lon = -8.610
stock = ["M001"]

[[world.pharmacy]]
id = "B"
lat = 41.151
lon = -8.611

[[world.pharmacy]]
id = "C"
lat = 41.152
lon = -8.612

[[world.pharmacy]]
id = "D"
lat = 41.153
lon = -8.613

[[world.pharmacy]]
id = "E"
lat = 41.154
lon = -8.614

[[step]]
at = "0s"
actor = "rui"
action = "submit_prescription"
params = { lines = [{ medicine = "M001" }] }

[[step]]
at = "0s"
actor = "rui"
action = "request_availability"
params = { lat = 41.15, lon = -8.61 }
expect = { state = "open", enquired = ["A", "B", "C", "D", "E"] }

[[step]]
at = "1m"
actor = "A"
action = "respond"
expect = { state = "fulfilled_full", best_pharmacy = "A" }
"#;

fn scenario(text: &str) -> Scenario {
    Scenario::parse(text, &Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")).unwrap()
}

#[test]
fn seed_reports_counts_and_refuses_a_second_time() {
    let s = scenario(FIVE_AND_TWENTY);
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("world");
    let report = seed(&s, &target).unwrap();
    assert_eq!((report.pharmacies, report.medicines, report.users), (5, 20, 6));
    match seed(&s, &target) {
        Err(SeedError::NotEmpty(path)) => assert!(path.ends_with("world")),
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn seeded_directory_serves_the_scenario() {
    let s = scenario(FIVE_AND_TWENTY);
    let dir = tempfile::tempdir().unwrap();
    seed(&s, dir.path()).unwrap();
    let server = EmbeddedServer::open(dir.path()).unwrap();
    let out = run(&s, server.url()).unwrap();
    assert!(out.passed(), "{:#?}", out.failures);
    // Same transcript as the self-seeding run.
    let embedded = run_embedded(&s).unwrap();
    assert_eq!(out.transcript, embedded.transcript);
}

#[test]
fn bad_latitude_names_the_record() {
    let text = FIVE_AND_TWENTY.replace("lat = 41.152", "lat = 91.0");
    let err = Scenario::parse(&text, &Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.starts_with("line 21:"), "{msg}");
    assert!(msg.contains("pharmacy C") && msg.contains("91"), "{msg}");
}

#[test]
fn failed_expectations_are_reported_not_fatal() {
    let text = FIVE_AND_TWENTY.replace(r#"best_pharmacy = "A""#, r#"best_pharmacy = "B""#);
    let out = run_embedded(&scenario(&text)).unwrap();
    assert!(!out.passed());
    assert_eq!(out.failures.len(), 1);
    assert!(out.failures[0].contains("best pharmacy"), "{:?}", out.failures);
    assert!(out.transcript.contains("FAIL (got \"A\")"));
    assert!(out.transcript.ends_with(&format!("result: FAIL (1 of {} assertions failed)\n", out.assertions)));
}

#[test]
fn unreachable_server_is_an_error() {
    let s = scenario(FIVE_AND_TWENTY);
    // Bind then drop to get a port nobody listens on.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    match run(&s, &format!("http://127.0.0.1:{port}")) {
        Err(RunError::Unreachable { url, .. }) => assert!(url.ends_with(&port.to_string())),
        other => panic!("expected unreachable, got {other:?}"),
    }
}

#[test]
fn missing_file_and_catalog_errors() {
    let err = Scenario::load(Path::new("/no/such/scenario.toml")).unwrap_err();
    assert!(err.to_string().contains("/no/such/scenario.toml"));
    let text = FIVE_AND_TWENTY.replace("../../../fixtures/medicines.csv", "missing.csv");
    let err = Scenario::parse(&text, Path::new("/tmp")).unwrap_err();
    assert!(err.to_string().starts_with("line 5:"), "{err}");
}
