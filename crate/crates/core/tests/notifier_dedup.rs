use std::collections::HashSet;

use chrono::{Duration, TimeZone, Utc};
use pharmafind_core::domain::{PharmacyId, RequestId, UserId, Verdict};
use pharmafind_core::engine::RequestState;
use pharmafind_core::notifier::{Notification, NotificationEvent, Notifier};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const STATES: [RequestState; 5] = [
    RequestState::Expanding,
    RequestState::FulfilledFull,
    RequestState::FulfilledPartial,
    RequestState::Exhausted,
    RequestState::Cancelled,
];
const VERDICTS: [Verdict; 3] = [Verdict::None, Verdict::Partial, Verdict::Full];

/// Independent identity of an event, as the engine would see it.
fn identity(owner: &UserId, e: &NotificationEvent) -> String {
    match e {
        NotificationEvent::PharmacyResponse {
            request_id,
            pharmacy_id,
            ..
        } => format!("{owner}|{request_id}|response|{pharmacy_id}"),
        NotificationEvent::StateChange { request_id, to, .. } => {
            format!("{owner}|{request_id}|state|{to}")
        }
    }
}

fn random_stream(rng: &mut StdRng) -> Vec<(UserId, NotificationEvent)> {
    let mut out = Vec::new();
    let mut used = HashSet::new();
    for _ in 0..rng.random_range(1..60) {
        let owner = UserId(format!("u{}", rng.random_range(0..3)));
        let request_id = RequestId(format!("req-{}", rng.random_range(0..5)));
        let e = if rng.random_bool(0.7) {
            NotificationEvent::PharmacyResponse {
                request_id,
                pharmacy_id: PharmacyId(format!("P{}", rng.random_range(0..8))),
                verdict: VERDICTS[rng.random_range(0..3)],
            }
        } else {
            NotificationEvent::StateChange {
                request_id,
                from: RequestState::Open,
                to: STATES[rng.random_range(0..STATES.len())],
            }
        };
        // The engine never produces two different events with the same identity.
        if used.insert(identity(&owner, &e)) {
            out.push((owner, e));
        }
    }
    out
}

fn strip(ns: Vec<Notification>) -> Vec<(u64, String, String)> {
    ns.into_iter()
        .map(|n| (n.id, n.user_id.0, serde_json::to_string(&n.payload).unwrap()))
        .collect()
}

#[test]
fn hundred_streams_with_every_event_injected_twice() {
    let mut rng = StdRng::seed_from_u64(7);
    let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 9, 0, 0).unwrap();
    for stream_no in 0..100 {
        let stream = random_stream(&mut rng);
        let distinct: HashSet<String> = stream.iter().map(|(o, e)| identity(o, e)).collect();

        // each event appears twice; the second copy lands at a random later position
        let mut doubled: Vec<(usize, bool)> = Vec::new();
        for i in 0..stream.len() {
            doubled.push((i, false));
        }
        for i in 0..stream.len() {
            let first = doubled.iter().position(|&(j, _)| j == i).unwrap();
            let at = rng.random_range(first + 1..=doubled.len());
            doubled.insert(at, (i, true));
        }

        let twice = Notifier::new(4096);
        let mut live = twice.subscribe();
        let mut created = 0;
        for (step, &(i, _)) in doubled.iter().enumerate() {
            let (owner, e) = &stream[i];
            let (_, fresh) = twice.emit(e.clone(), owner, t0 + Duration::seconds(step as i64));
            created += fresh as usize;
        }
        assert_eq!(twice.len(), distinct.len(), "stream {stream_no}");
        assert_eq!(created, distinct.len());

        // the live channel carried each inbox entry once
        let mut pushed = Vec::new();
        while let Ok(n) = live.try_recv() {
            pushed.push(n.id);
        }
        assert_eq!(pushed, (1..=distinct.len() as u64).collect::<Vec<_>>());

        // same inbox as the deduplicated stream emitted once, in first-occurrence order
        let once = Notifier::new(16);
        let mut seen = HashSet::new();
        for (step, &(i, _)) in doubled.iter().enumerate() {
            if seen.insert(i) {
                let (owner, e) = &stream[i];
                once.emit(e.clone(), owner, t0 + Duration::seconds(step as i64));
            }
        }
        for u in 0..3 {
            let user = UserId(format!("u{u}"));
            assert_eq!(strip(twice.list(&user, false)), strip(once.list(&user, false)));
        }
    }
}
