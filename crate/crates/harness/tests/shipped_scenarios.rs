use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use pharmafind_harness::scenario::{Action, Scenario};
use pharmafind_harness::{run_embedded, RunOutcome};

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn shipped() -> Vec<(String, Scenario)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(scenario_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            (name, Scenario::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display())))
        })
        .collect()
}

fn run_ok(name: &str, s: &Scenario) -> RunOutcome {
    let out = run_embedded(s).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(out.passed(), "{name} failed: {:#?}\n{}", out.failures, out.transcript);
    out
}

#[test]
fn every_shipped_scenario_passes_and_is_deterministic() {
    let all = shipped();
    assert_eq!(all.len(), 6);
    for (name, s) in &all {
        let first = run_ok(name, s);
        let second = run_ok(name, s);
        assert_eq!(first.transcript, second.transcript, "{name} transcript differs between runs");
        assert!(first.assertions > 10, "{name} asserts too little");
        assert!(first.transcript.ends_with(&format!("result: PASS ({} assertions)\n", first.assertions)));
    }
}

#[test]
fn suite_reaches_every_terminal_state() {
    let mut reached = BTreeSet::new();
    for (_, s) in shipped() {
        for step in &s.steps {
            if let Some(state) = &step.expect.state {
                reached.insert(state.clone());
            }
        }
    }
    for terminal in ["fulfilled_full", "fulfilled_partial", "exhausted", "cancelled"] {
        assert!(reached.contains(terminal), "no shipped scenario ends {terminal}");
    }
}

#[test]
fn happy_path_has_one_round_and_one_pharmacy_notification() {
    let (_, s) = shipped().into_iter().find(|(n, _)| n == "happy_path").unwrap();
    let submit = s.steps.iter().find_map(|st| match &st.action {
        Action::SubmitPrescription { lines } => Some(lines.len()),
        _ => None,
    });
    assert_eq!(submit, Some(3));
    let out = run_ok("happy_path", &s);
    assert_eq!(out.transcript.matches("dispatched round=").count(), 1);
    assert!(out.transcript.contains("T09:02:00Z req-1 response_recorded pharmacy=P02 verdict=full"));
    assert!(!out.transcript.contains("round_expanded"));
    assert!(out.transcript.contains("check notification kinds = [\"pharmacy_response\", \"request_state_change\"]: ok"));
}

#[test]
fn silent_round_expands_after_exactly_ten_minutes() {
    let (_, s) = shipped().into_iter().find(|(n, _)| n == "silent_round").unwrap();
    let out = run_ok("silent_round", &s);
    assert!(out.transcript.contains("2024-01-01T09:10:00Z req-1 round_expanded round=2 radius=10km"));
    assert!(!out.transcript.contains("T09:09:59Z req-1 round_expanded"));
}
