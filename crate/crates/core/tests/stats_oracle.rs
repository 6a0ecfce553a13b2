use std::time::Instant;

use pharmafind_core::stats::{
    analyze, chi_square_sf, describe, parse_contingency_fixture, parse_count_fixture,
    pearson_chi_square, tabulate, ContingencyTable2x2, StatsError,
};
use proptest::prelude::*;

const CROSSTABS: &str = include_str!("../../../fixtures/survey_crosstabs.toml");
const COUNTS: &str = include_str!("../../../fixtures/survey_counts.toml");

/// Γ(k/2) from Γ(1/2) = √π and Γ(1) = 1 by the recurrence Γ(z+1) = zΓ(z).
fn gamma_half(k: u32) -> f64 {
    let (mut z, mut g) = if k.is_multiple_of(2) {
        (1.0, 1.0)
    } else {
        (0.5, std::f64::consts::PI.sqrt())
    };
    while z < k as f64 / 2.0 {
        g *= z;
        z += 1.0;
    }
    g
}

/// Upper tail of the chi-square density by composite Simpson's rule.
/// Substituting t = u² removes the singularity of the df = 1 density at 0.
fn sf_by_integration(x: f64, df: u32) -> f64 {
    let k = df as f64;
    let norm = 2f64.powf(k / 2.0) * gamma_half(df);
    let f = |u: f64| 2.0 * u.powf(k - 1.0) * (-u * u / 2.0).exp() / norm;
    let lo = x.sqrt();
    let hi = lo + 40.0;
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn sf_matches_numerical_integration_at_listed_points() {
    for df in [1, 2, 5] {
        for x in [0.5, 1.0, 2.0, 3.841, 6.763, 11.530, 20.0] {
            let got = chi_square_sf(x, df).unwrap();
            let want = sf_by_integration(x, df);
            assert!((got - want).abs() < 1e-7, "df={df} x={x}: {got} vs {want}");
        }
    }
}

#[test]
fn sf_matches_integration_on_a_grid() {
    for df in 1..=10 {
        for i in 0..=200 {
            let x = i as f64 * 0.5;
            let got = chi_square_sf(x, df).unwrap();
            let want = sf_by_integration(x, df);
            assert!((got - want).abs() < 1e-9, "df={df} x={x}: {got} vs {want}");
        }
    }
}

#[test]
fn conventional_critical_value() {
    assert_eq!(format!("{:.4}", chi_square_sf(3.841, 1).unwrap()), "0.0500");
    let p = chi_square_sf(6.763, 1).unwrap();
    assert!((p - 0.00930).abs() < 5e-5, "{p}");
}

/// Σ (O − E)² / E with expected counts from the margins.
fn sum_form(t: &ContingencyTable2x2) -> f64 {
    let obs = [[t.a, t.b], [t.c, t.d]].map(|r| r.map(|v| v as f64));
    let n: f64 = obs.iter().flatten().sum();
    let rows = [obs[0][0] + obs[0][1], obs[1][0] + obs[1][1]];
    let cols = [obs[0][0] + obs[1][0], obs[0][1] + obs[1][1]];
    let mut x2 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] * cols[j] / n;
            x2 += (obs[i][j] - e).powi(2) / e;
        }
    }
    x2
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #[test]
    fn margin_and_sum_forms_agree(a in 1u64..500, b in 1u64..500, c in 1u64..500, d in 1u64..500) {
        let t = ContingencyTable2x2::new(a, b, c, d);
        let r = pearson_chi_square(&t).unwrap();
        prop_assert!((r.statistic - sum_form(&t)).abs() < 1e-9 * r.statistic.max(1.0));
    }

    #[test]
    fn invariant_under_swaps_and_transpose(a in 1u64..1000, b in 1u64..1000, c in 1u64..1000, d in 1u64..1000) {
        let base = pearson_chi_square(&ContingencyTable2x2::new(a, b, c, d)).unwrap().statistic;
        let variants = [
            ContingencyTable2x2::new(c, d, a, b),
            ContingencyTable2x2::new(b, a, d, c),
            ContingencyTable2x2::new(a, b, c, d).transpose(),
        ];
        for v in variants {
            let s = pearson_chi_square(&v).unwrap().statistic;
            prop_assert!(close(s, base, 1e-12) || (s - base).abs() < 1e-12, "{s} vs {base}");
        }
    }

    #[test]
    fn zero_exactly_for_proportional_rows(a in 1u64..50, b in 1u64..50, m in 1u64..20) {
        let r = pearson_chi_square(&ContingencyTable2x2::new(a, b, a * m, b * m)).unwrap();
        prop_assert_eq!(r.statistic, 0.0);
        prop_assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn p_decreases_as_statistic_grows(x in 0.0f64..60.0, dx in 0.01f64..10.0, df in 1u32..10) {
        prop_assert!(chi_square_sf(x + dx, df).unwrap() < chi_square_sf(x, df).unwrap());
    }

    #[test]
    fn describe_matches_two_pass(values in prop::collection::vec(-1e6f64..1e6, 2..200)) {
        let s = describe(&values).unwrap();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((s.mean - mean).abs() <= 1e-12 * mean.abs().max(values.iter().map(|v| v.abs()).fold(0.0, f64::max)));
        prop_assert!(close(s.sd, var.sqrt(), 1e-9) || (s.sd - var.sqrt()).abs() < 1e-9);
        prop_assert_eq!(s.min, min);
        prop_assert_eq!(s.max, max);
        prop_assert!(s.min <= s.mean && s.mean <= s.max && s.sd >= 0.0);
    }
}

#[test]
fn degenerate_margin_is_an_error() {
    assert!(matches!(
        pearson_chi_square(&ContingencyTable2x2::new(0, 0, 3, 4)),
        Err(StatsError::DegenerateMargin { .. })
    ));
}

#[test]
fn describe_small_cases() {
    let s = describe(&[5.0, 5.0, 5.0]).unwrap();
    assert_eq!((s.mean, s.sd), (5.0, 0.0));
    let s = describe(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(s.mean, 2.5);
    // hand check: deviations ±1.5, ±0.5 → sum of squares 5, variance 5/3
    assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(format!("{:.4}", s.sd), "1.2910");
    assert!(describe(&[1.0]).is_err());
}

#[test]
fn every_shipped_crosstab_reproduces_its_published_pair() {
    let start = Instant::now();
    let fixture = parse_contingency_fixture(CROSSTABS).unwrap();
    let results = analyze(&fixture).unwrap();
    assert_eq!(results.len(), 9);
    for r in &results {
        assert_eq!(r.matches_reported(), Some(true), "{} / {}: {:?}", r.group, r.factor, r.result);
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn shipped_counts_reproduce_every_published_percentage() {
    let fixture = parse_count_fixture(COUNTS).unwrap();
    let mut checked = 0;
    for sec in &fixture.sections {
        for q in &sec.questions {
            let table = q.tabulate().unwrap();
            for (row, opt) in table.rows.iter().zip(&q.options) {
                let want = opt.reported.expect("every shipped option carries its percentage");
                assert_eq!(format!("{:.1}", row.percent), format!("{want:.1}"), "{}: {}", q.title, opt.label);
                checked += 1;
            }
        }
    }
    assert!(checked > 60, "{checked}");
}

#[test]
fn tabulation_examples() {
    let t = tabulate(&[("No", 171), ("Yes", 100)]).unwrap();
    assert_eq!(t.percent_strings(), ["63.1", "36.9"]);
    assert_eq!(tabulate(&[("x", 1)]).unwrap().percent_strings(), ["100.0"]);
    let t = tabulate(&[("Some", 39), ("High", 54), ("Low", 6), ("None", 1)]).unwrap();
    assert_eq!(t.percent_strings(), ["39.0", "54.0", "6.0", "1.0"]);
    assert_eq!(tabulate::<&str>(&[]), Err(StatsError::Empty));
    // half-up at the exact midpoint: 1/8 = 12.5% → 12.5, 1/16 = 6.25% → 6.3
    assert_eq!(tabulate(&[("a", 1), ("b", 15)]).unwrap().percent_strings(), ["6.3", "93.8"]);
}
