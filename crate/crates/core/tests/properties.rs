//! Property tests for the structural invariants: transform unitarity,
//! solid-angle additivity, and the binned-distance inequalities.

use num_complex::Complex64;
use proptest::prelude::*;

use qflux_core::compare::{ks_distance, l1_distance, normalize, BinnedDensity};
use qflux_core::flux::SolidAngle;
use qflux_core::state::{from_momentum, to_momentum, GridSpec, GridState};

fn arb_amplitudes(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
    proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n)
        .prop_map(|v| v.into_iter().map(|(re, im)| Complex64::new(re, im)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn plancherel_and_round_trip(amps in arb_amplitudes(64), length in 4.0f64..64.0) {
        let spec = GridSpec::new_1d(64, length).unwrap();
        let gs = GridState::new(spec.clone(), amps, 0.0, 1.0).unwrap();
        let scale = gs.norm_sq().max(1e-12);
        let ms = to_momentum(&gs);
        prop_assert!((ms.norm_sq() - gs.norm_sq()).abs() <= 1e-10 * scale.max(1.0));
        let back = from_momentum(&ms, &spec).unwrap();
        let max_err = gs
            .amplitudes
            .iter()
            .zip(&back.amplitudes)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        prop_assert!(max_err <= 1e-12 * scale.sqrt().max(1.0));
    }

    #[test]
    fn cap_and_complement_partition_directions(
        ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
        angle in 0.05f64..3.0,
        dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..1.0,
    ) {
        prop_assume!(ax * ax + ay * ay + az * az > 1e-3);
        prop_assume!(dx * dx + dy * dy + dz * dz > 1e-6);
        let cap = SolidAngle::cap([ax, ay, az], angle).unwrap();
        let comp = cap.clone().complement();
        let dir = [dx, dy, dz];
        let total = cap.weight(dir) + comp.weight(dir);
        prop_assert!((total - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn distances_are_metric_like(
        a in proptest::collection::vec(0.0f64..1.0, 16),
        b in proptest::collection::vec(0.0f64..1.0, 16),
    ) {
        let sum_a: f64 = a.iter().sum();
        let sum_b: f64 = b.iter().sum();
        prop_assume!(sum_a > 1e-6 && sum_b > 1e-6);
        let edges: Vec<f64> = (0..=16).map(|i| i as f64).collect();
        let da = BinnedDensity::new(edges.clone(), a).unwrap();
        let db = BinnedDensity::new(edges, b).unwrap();
        let l1 = l1_distance(&da, &db).unwrap();
        let ks = ks_distance(&da, &db).unwrap();
        prop_assert!(l1 >= 0.0 && ks >= 0.0);
        prop_assert!((l1_distance(&da, &da).unwrap()).abs() == 0.0);
        prop_assert!((l1 - l1_distance(&db, &da).unwrap()).abs() <= 1e-15);
        // KS <= L1/2 on identically binned normalized densities
        let na = normalize(&da).unwrap();
        let nb = normalize(&db).unwrap();
        let l1n = l1_distance(&na, &nb).unwrap();
        let ksn = ks_distance(&na, &nb).unwrap();
        prop_assert!(ksn <= l1n / 2.0 + 1e-15);
    }

    #[test]
    fn normalize_is_idempotent(a in proptest::collection::vec(0.0f64..1.0, 8)) {
        prop_assume!(a.iter().sum::<f64>() > 1e-6);
        let edges: Vec<f64> = (0..=8).map(|i| i as f64).collect();
        let d = BinnedDensity::new(edges, a).unwrap();
        let n1 = normalize(&d).unwrap();
        let n2 = normalize(&n1).unwrap();
        for (x, y) in n1.masses.iter().zip(&n2.masses) {
            prop_assert!((x - y).abs() <= 1e-15);
        }
        prop_assert!((n1.total() - 1.0).abs() <= 1e-12);
    }
}
