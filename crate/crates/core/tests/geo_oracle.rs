use std::time::Instant;

use pharmafind_core::domain::{haversine_distance, GeoPoint, Pharmacy, PharmacyId};
use pharmafind_core::geo::{GeoRegistry, Nearby};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const R: f64 = 6371.0;

/// Spherical law of cosines, a formula independent of the haversine form.
fn law_of_cosines_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p1, p2) = (a.lat().to_radians(), b.lat().to_radians());
    let dl = (b.lon() - a.lon()).to_radians();
    let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
    R * c.clamp(-1.0, 1.0).acos()
}

fn point() -> impl Strategy<Value = GeoPoint> {
    (-90.0f64..=90.0, -180.0f64..=180.0).prop_map(|(la, lo)| GeoPoint::new(la, lo).unwrap())
}

#[test]
fn porto_to_lisbon_matches_law_of_cosines() {
    let porto = GeoPoint::new(41.1579, -8.6291).unwrap();
    let lisbon = GeoPoint::new(38.7223, -9.1393).unwrap();
    let h = haversine_distance(porto, lisbon);
    let c = law_of_cosines_km(porto, lisbon);
    assert!((h - c).abs() < 1e-3, "haversine {h} vs cosines {c}");
    assert!((270.0..280.0).contains(&h), "{h}");
}

proptest! {
    #[test]
    fn distance_is_symmetric_and_zero_on_self(a in point(), b in point()) {
        prop_assert_eq!(haversine_distance(a, a), 0.0);
        let ab = haversine_distance(a, b);
        let ba = haversine_distance(b, a);
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        prop_assert!((0.0..=std::f64::consts::PI * R + 1e-9).contains(&ab));
    }

    #[test]
    fn triangle_inequality(a in point(), b in point(), c in point()) {
        let ac = haversine_distance(a, c);
        let ab = haversine_distance(a, b);
        let bc = haversine_distance(b, c);
        prop_assert!(ac <= ab + bc + 1e-6);
    }

    #[test]
    fn agrees_with_law_of_cosines_away_from_tiny_arcs(a in point(), b in point()) {
        let h = haversine_distance(a, b);
        // acos loses precision for very short arcs; the cosine form is only a fair oracle above ~1 km
        prop_assume!(h > 1.0);
        prop_assert!((h - law_of_cosines_km(a, b)).abs() < 1e-3);
    }
}

fn random_world(rng: &mut StdRng, n: usize) -> Vec<Pharmacy> {
    (0..n)
        .map(|i| {
            // a 1 x 1 degree box around Porto so radii of a few km select interesting subsets
            let lat = 41.0 + rng.random_range(0.0..1.0);
            let lon = -9.0 + rng.random_range(0.0..1.0);
            Pharmacy {
                id: PharmacyId(format!("P{:03}", rng.random_range(0..1000) * 1000 + i)),
                name: format!("pharmacy {i}"),
                location: GeoPoint::new(lat, lon).unwrap(),
                contact: String::new(),
                registered: rng.random_bool(0.9),
            }
        })
        .collect()
}

/// Brute force: compute every distance, filter, sort by (distance, id).
fn oracle_ranked(world: &[Pharmacy], origin: GeoPoint) -> Vec<Nearby> {
    let mut all: Vec<Nearby> = world
        .iter()
        .filter(|p| p.registered)
        .map(|p| Nearby {
            pharmacy: p.clone(),
            distance_km: haversine_distance(origin, p.location),
        })
        .collect();
    all.sort_by(|a, b| {
        a.distance_km
            .partial_cmp(&b.distance_km)
            .unwrap()
            .then(a.pharmacy.id.cmp(&b.pharmacy.id))
    });
    all
}

#[test]
fn thousand_random_queries_match_brute_force() {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x9e37_79b9);
    let world = random_world(&mut rng, 200);
    let reg = GeoRegistry::from_pharmacies(world.clone()).unwrap();
    let mut radius_hits = 0;
    for q in 0..1000 {
        let origin = GeoPoint::new(
            40.9 + rng.random_range(0.0..1.2),
            -9.1 + rng.random_range(0.0..1.2),
        )
        .unwrap();
        let ranked = oracle_ranked(&world, origin);
        if q % 2 == 0 {
            let radius = rng.random_range(0.0..40.0);
            let expected: Vec<Nearby> = ranked
                .into_iter()
                .filter(|n| n.distance_km <= radius)
                .collect();
            let got = reg.within_radius(origin, radius);
            radius_hits += got.len();
            assert_eq!(got, expected, "within_radius query {q}");
        } else {
            let k = rng.random_range(0..25);
            let expected: Vec<Nearby> = ranked.into_iter().take(k).collect();
            assert_eq!(reg.nearest(origin, k), expected, "nearest query {q}");
        }
    }
    assert!(radius_hits > 0, "queries should not all be empty");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
}

#[test]
fn ties_at_equal_distance_break_by_id() {
    let here = GeoPoint::new(41.15, -8.61).unwrap();
    let twin = |id: &str| Pharmacy {
        id: id.into(),
        name: id.into(),
        location: here,
        contact: String::new(),
        registered: true,
    };
    let reg = GeoRegistry::from_pharmacies([twin("c"), twin("a"), twin("b")]).unwrap();
    let ids: Vec<_> = reg.within_radius(here, 0.0).into_iter().map(|n| n.pharmacy.id.0).collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn radius_results_are_monotone_and_nearest_is_a_prefix(
        seed in any::<u64>(),
        r1 in 0.0f64..30.0,
        extra in 0.0f64..30.0,
        k in 0usize..40,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let world = random_world(&mut rng, 60);
        let reg = GeoRegistry::from_pharmacies(world).unwrap();
        let origin = GeoPoint::new(41.5, -8.5).unwrap();
        let small = reg.within_radius(origin, r1);
        let large = reg.within_radius(origin, r1 + extra);
        prop_assert!(small.len() <= large.len());
        prop_assert_eq!(&large[..small.len()], &small[..]);
        let everything = reg.nearest(origin, usize::MAX);
        let first_k = reg.nearest(origin, k);
        prop_assert_eq!(&everything[..first_k.len()], &first_k[..]);
        prop_assert_eq!(&everything[..large.len()], &large[..]);
    }
}
