//! Replays the fuzz corpus, plus seeded mutations of it, through the fuzz
//! target bodies so the decoders get exercised without a nightly toolchain.

#[path = "../../../fuzz/src/checks.rs"]
mod checks;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus for {target}");
    out
}

fn mutate(rng: &mut StdRng, seed: &[u8], pool: &[(String, Vec<u8>)]) -> Vec<u8> {
    let mut d = seed.to_vec();
    for _ in 0..rng.random_range(1..4) {
        let len = d.len();
        match rng.random_range(0..6) {
            0 if len > 0 => {
                let i = rng.random_range(0..len);
                d[i] ^= 1 << rng.random_range(0..8);
            }
            1 => {
                let i = rng.random_range(0..=len);
                const BYTES: &[u8] = b",\"\n#{}[]=-0.9e";
                d.insert(i, BYTES[rng.random_range(0..BYTES.len())]);
            }
            2 if len > 0 => {
                let i = rng.random_range(0..len);
                let j = rng.random_range(i..=len.min(i + 16));
                d.drain(i..j);
            }
            3 => d.truncate(rng.random_range(0..=len)),
            4 => {
                let other = &pool[rng.random_range(0..pool.len())].1;
                if !other.is_empty() {
                    let a = rng.random_range(0..other.len());
                    let b = rng.random_range(a..=other.len());
                    let at = rng.random_range(0..=len);
                    d.splice(at..at, other[a..b].iter().copied());
                }
            }
            _ if len > 1 => {
                // Duplicate a line, which the line-based formats care about.
                let i = rng.random_range(0..len);
                let end = d[i..].iter().position(|&b| b == b'\n').map_or(len, |p| i + p + 1);
                let chunk = d[i..end].to_vec();
                d.splice(end..end, chunk);
            }
            _ => {}
        }
    }
    d
}

fn replay(target: &str, check: fn(&[u8]), mutations: usize) {
    let seeds = corpus(target);
    let mut rng = StdRng::seed_from_u64(0xf022);
    let run = |name: &str, input: &[u8]| {
        if catch_unwind(AssertUnwindSafe(|| check(input))).is_err() {
            panic!("{target} failed on {name}: {:?}", String::from_utf8_lossy(input));
        }
    };
    for (name, data) in &seeds {
        run(name, data);
    }
    for i in 0..mutations {
        let (name, data) = &seeds[i % seeds.len()];
        let input = mutate(&mut rng, data, &seeds);
        run(&format!("mutation {i} of {name}"), &input);
    }
}

#[test]
fn catalog() {
    replay("catalog", checks::catalog, 3000);
}

#[test]
fn pharmacy_seed() {
    replay("pharmacy_seed", checks::pharmacy_seed, 3000);
}

#[test]
fn token_table() {
    replay("token_table", checks::token_table, 3000);
}

#[test]
fn contingency_fixture() {
    replay("contingency_fixture", checks::contingency_fixture, 2000);
}

#[test]
fn count_fixture() {
    replay("count_fixture", checks::count_fixture, 2000);
}

#[test]
fn scenario() {
    replay("scenario", checks::scenario, 2000);
}

#[test]
fn store_log() {
    replay("store_log", checks::store_log, 2000);
}

#[test]
fn api_body() {
    replay("api_body", checks::api_body, 1500);
}
