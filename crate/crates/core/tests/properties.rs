//! Property-based invariants: file round-trips, worst-case cost algebra,
//! linearity of the simulated dynamics, and definiteness consequences of
//! the standing assumptions.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use robustlq_core::bsde::{robust_cost, BsdeMethod, BsdeValue};
use robustlq_core::scenario::{LqScenario, LqScenarioSet};
use robustlq_core::sde::{generate_paths, simulate_lq, ControlPath};
use robustlq_core::{load_scenario_file, save_scenario_file, validate_h7, TimeGrid};

fn value(y: f64) -> BsdeValue {
    BsdeValue {
        y0: y,
        stderr: 0.0,
        method: BsdeMethod::Representation,
    }
}

fn finite_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3..1e3_f64,
        Just(0.0),
        Just(1.0),
        Just(-1.0),
        Just(0.1234567890123456),
    ]
}

fn scalar_pair_set(values: Vec<f64>, steps: usize) -> LqScenarioSet {
    // values drive a time-varying A table; the rest stays simple
    let a: Vec<DMatrix<f64>> = (0..steps)
        .map(|i| DMatrix::from_element(1, 1, values[i % values.len()] / 1e3))
        .collect();
    let one = DMatrix::from_element(1, 1, 1.0);
    let z = DMatrix::zeros(1, 1);
    let sc = LqScenario::new(
        a,
        vec![one.clone(); steps],
        vec![z.clone(); steps],
        vec![z.clone(); steps],
        vec![0.1; steps],
        vec![one.clone(); steps],
        vec![z.clone(); steps],
        vec![one.clone(); steps],
        one.clone(),
    );
    LqScenarioSet::new(
        vec![sc.clone(), sc],
        vec![0.2; steps],
        DVector::from_element(1, 1.0),
        TimeGrid::new(1.0, steps).unwrap(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scenario_file_round_trip_is_bit_identical(
        values in prop::collection::vec(finite_f64(), 4..12),
        steps in 4usize..12,
    ) {
        let set = scalar_pair_set(values, steps);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.toml");
        save_scenario_file(&set, &path).unwrap();
        let loaded = load_scenario_file(&path, None).unwrap().set;
        prop_assert_eq!(set.grid, loaded.grid);
        for (a, b) in set.scenarios.iter().zip(loaded.scenarios.iter()) {
            for (ma, mb) in a.a.iter().zip(b.a.iter()) {
                prop_assert_eq!(ma[(0, 0)].to_bits(), mb[(0, 0)].to_bits());
            }
            prop_assert_eq!(a.g[(0, 0)].to_bits(), b.g[(0, 0)].to_bits());
        }
        for (a, b) in set.f.iter().zip(loaded.f.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn robust_cost_is_the_max_and_relabeling_swaps_the_vertex(
        y1 in -1e6..1e6_f64,
        y2 in -1e6..1e6_f64,
    ) {
        let rc = robust_cost(&[value(y1), value(y2)]).unwrap();
        prop_assert_eq!(rc.value, y1.max(y2));
        let swapped = robust_cost(&[value(y2), value(y1)]).unwrap();
        prop_assert_eq!(swapped.value, rc.value);
        if y1 != y2 {
            prop_assert_eq!(rc.argmax_theta + swapped.argmax_theta, 3);
        }
    }

    #[test]
    fn lq_simulation_is_linear_in_initial_state_and_control(
        alpha in -2.0..2.0_f64,
        beta in -2.0..2.0_f64,
        a0 in -1.0..1.0_f64,
        b0 in -1.0..1.0_f64,
        seed in 0u64..50,
    ) {
        let steps = 16;
        let mk_set = |x0: f64| {
            let one = DMatrix::from_element(1, 1, 1.0);
            let half = DMatrix::from_element(1, 1, 0.5);
            let z = DMatrix::zeros(1, 1);
            let sc = LqScenario::constant(
                steps, half.clone(), one.clone(), half, DMatrix::from_element(1, 1, 0.2),
                0.0, z.clone(), z.clone(), one.clone(), z,
            );
            LqScenarioSet::new(
                vec![sc.clone(), sc],
                vec![0.0; steps],
                DVector::from_element(1, x0),
                TimeGrid::new(1.0, steps).unwrap(),
            )
            .unwrap()
        };
        let ens = generate_paths(TimeGrid::new(1.0, steps).unwrap(), 1, 8, seed).unwrap();
        let u1 = ControlPath::Deterministic(
            (0..steps).map(|i| DVector::from_element(1, (i as f64 * 0.37).sin())).collect(),
        );
        let u2 = ControlPath::Deterministic(
            (0..steps).map(|i| DVector::from_element(1, (i as f64 * 0.71).cos())).collect(),
        );
        let combo = ControlPath::Deterministic(
            (0..steps)
                .map(|i| {
                    DVector::from_element(
                        1,
                        alpha * (i as f64 * 0.37).sin() + beta * (i as f64 * 0.71).cos(),
                    )
                })
                .collect(),
        );
        let run_a = simulate_lq(&mk_set(a0), 0, &u1, &ens).unwrap();
        let run_b = simulate_lq(&mk_set(b0), 0, &u2, &ens).unwrap();
        let run_combo = simulate_lq(&mk_set(alpha * a0 + beta * b0), 0, &combo, &ens).unwrap();
        for p in 0..8 {
            for i in 0..=steps {
                let expected = alpha * run_a.state(p, i)[0] + beta * run_b.state(p, i)[0];
                let got = run_combo.state(p, i)[0];
                let scale = expected.abs().max(1.0);
                prop_assert!(
                    (got - expected).abs() <= 1e-10 * scale,
                    "path {} node {}: {} vs {}", p, i, got, expected
                );
            }
        }
    }

    #[test]
    fn h7_implies_r_plus_psd_invertible(seed in 0u64..200) {
        // every R(t) + M with M PSD stays invertible on validated instances
        let set = robustlq_core::instances::random_validated(seed, 2, 2, 4);
        prop_assume!(validate_h7(&set, 0.29).unwrap().ok);
        let mut rng = seed;
        let mut next = move || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for sc in &set.scenarios {
            for r in &sc.r {
                let k = r.nrows();
                let w = DMatrix::from_fn(k, k, |_, _| next());
                let psd = &w.transpose() * &w;
                let sum = r + psd;
                let chol = sum.clone().cholesky();
                prop_assert!(chol.is_some(), "R + PSD lost definiteness");
                // finite condition number
                let eigs = sum.symmetric_eigenvalues();
                let max = eigs.iter().fold(0.0_f64, |a, v| a.max(*v));
                let min = eigs.iter().fold(f64::INFINITY, |a, v| a.min(*v));
                prop_assert!(min > 0.0 && (max / min).is_finite());
            }
        }
    }
}
