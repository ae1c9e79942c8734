//! Fog-layer tests: aggregation algebra, sketch bounds, noising statistics,
//! hazard closed forms, allocation against a grid-search oracle, and the
//! queue/energy/alert tick.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use quiver::fog::{
    aggregate, allocate, cache_hit, fog_delay, fog_objective, fog_tick, hazard_score, pick_route,
    privatize, schedule_subchannel, sketch, FogState, FogTickCoefs, TaskDescriptor,
};
use quiver::{rng, Error};

fn task(priority: f64, work: f64) -> TaskDescriptor {
    TaskDescriptor {
        priority,
        work,
        energy_coef: 0.0,
        storage_coef: 0.0,
    }
}

// ------------------------------------------------------------- aggregation

#[test]
fn identity_weight_on_a_single_input_recovers_it() {
    let y = DVector::from_row_slice(&[1.0, -2.0]);
    let u = DMatrix::zeros(2, 2);
    let z = aggregate(&[(DMatrix::identity(2, 2), y.clone())], &u, &DVector::zeros(2)).unwrap();
    assert_eq!(z, y);
}

#[test]
fn half_weights_average_two_inputs() {
    let a = DVector::from_row_slice(&[2.0, 0.0]);
    let b = DVector::from_row_slice(&[0.0, 4.0]);
    let half = DMatrix::identity(2, 2) * 0.5;
    let z = aggregate(
        &[(half.clone(), a), (half, b)],
        &DMatrix::zeros(2, 2),
        &DVector::zeros(2),
    )
    .unwrap();
    assert_eq!(z.as_slice(), &[1.0, 2.0]);
}

#[test]
fn empty_vehicle_set_leaves_only_the_infrastructure_term() {
    let u = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    let ybar = DVector::from_row_slice(&[3.0, 4.0]);
    let z = aggregate(&[], &u, &ybar).unwrap();
    assert_eq!(z.as_slice(), &[3.0, 8.0]);
}

#[test]
fn aggregation_rejects_inconsistent_shapes() {
    let y = DVector::zeros(3);
    let w = DMatrix::identity(2, 2);
    let err = aggregate(&[(w, y)], &DMatrix::zeros(2, 2), &DVector::zeros(2)).unwrap_err();
    assert!(matches!(err, Error::DimMismatch { .. }));
    let err = aggregate(&[], &DMatrix::zeros(2, 3), &DVector::zeros(2)).unwrap_err();
    assert!(matches!(err, Error::DimMismatch { .. }));
}

// ------------------------------------------------------------------ sketch

#[test]
fn zero_preactivation_sketches_to_zero() {
    let z = DVector::from_row_slice(&[5.0, -7.0]);
    let s = sketch(
        &z,
        &DMatrix::identity(2, 2),
        &DMatrix::zeros(2, 2),
        &DVector::zeros(2),
    )
    .unwrap();
    assert_eq!(s.as_slice(), &[0.0, 0.0]);
}

#[test]
fn scalar_sketch_matches_tanh() {
    let s = sketch(
        &DVector::from_row_slice(&[0.5]),
        &DMatrix::identity(1, 1),
        &DMatrix::identity(1, 1),
        &DVector::zeros(1),
    )
    .unwrap();
    assert!((s[0] - 0.5f64.tanh()).abs() < 1e-15);
    assert!((s[0] - 0.462117).abs() < 1e-6);
}

#[test]
fn saturated_sketches_stay_inside_the_projection_box() {
    let mut r = rng::stream(5, "test.sketch");
    for _ in 0..50 {
        let p = DMatrix::from_fn(3, 4, |_, _| r.gen_range(-2.0..2.0));
        let omega = DMatrix::from_fn(4, 5, |_, _| r.gen_range(-3.0..3.0));
        let b = DVector::from_fn(4, |_, _| r.gen_range(-1.0..1.0));
        let z = DVector::from_fn(5, |_, _| r.gen_range(-1e6..1e6));
        let s = sketch(&z, &p, &omega, &b).unwrap();
        for i in 0..3 {
            let row_bound: f64 = (0..4).map(|j| p[(i, j)].abs()).sum();
            assert!(s[i].abs() <= row_bound + 1e-12);
        }
    }
}

// ----------------------------------------------------------------- privacy

#[test]
fn zero_sigma_is_the_exact_identity() {
    let s = DVector::from_row_slice(&[1.0, -2.0, 3.0]);
    assert_eq!(privatize(&s, 0.0, 7), s);
}

#[test]
fn noise_variance_matches_sigma_squared() {
    let s = DVector::zeros(1);
    let sigma = 0.7;
    let n = 100_000;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for seed in 0..n {
        let v = privatize(&s, sigma, seed as u64)[0];
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    assert!(
        (var - sigma * sigma).abs() < 0.02 * sigma * sigma,
        "empirical variance {var} vs {}",
        sigma * sigma
    );
}

#[test]
fn privatization_is_reproducible_per_seed() {
    let s = DVector::from_row_slice(&[1.0, 2.0]);
    assert_eq!(privatize(&s, 0.5, 42), privatize(&s, 0.5, 42));
    assert_ne!(privatize(&s, 0.5, 42), privatize(&s, 0.5, 43));
}

// ------------------------------------------------------------------ hazard

#[test]
fn hazard_closed_forms() {
    let z = DVector::zeros(2);
    let d = DMatrix::identity(2, 2);
    // softplus(0) = ln 2.
    assert!((hazard_score(&z, &d, 1.0, 0.0) - 2f64.ln()).abs() < 1e-12);
    // Saturation: argument 100 returns exactly 100.
    assert_eq!(hazard_score(&z, &d, 1.0, 100.0), 100.0);
    // softplus(ln(e-1)) = 1.
    let beta = (std::f64::consts::E - 1.0).ln();
    assert!((hazard_score(&z, &d, 1.0, beta) - 1.0).abs() < 1e-12);
}

#[test]
fn hazard_is_nonnegative_and_monotone_in_the_detection_norm() {
    let d = DMatrix::identity(1, 1);
    let mut prev = -1.0;
    for i in 0..100 {
        let z = DVector::from_row_slice(&[i as f64 * 0.3]);
        let h = hazard_score(&z, &d, 0.7, -5.0);
        assert!(h >= 0.0);
        assert!(h >= prev);
        prev = h;
    }
}

// ------------------------------------------------------------------ routes

#[test]
fn route_gate_blocks_when_hazard_exceeds_threshold() {
    let cands = [(5.0, 0.1, 10.0)];
    assert_eq!(pick_route(&cands, [1.0, 0.0, 0.0], 4.0, 3.0).unwrap(), None);
    assert_eq!(
        pick_route(&cands, [1.0, 0.0, 0.0], 2.0, 3.0).unwrap(),
        Some(0)
    );
}

#[test]
fn route_score_is_argmin_of_the_weighted_blend() {
    let cands = [(5.0, 0.0, 1.0), (3.0, 0.0, 1.0), (7.0, 0.0, 1.0)];
    assert_eq!(
        pick_route(&cands, [1.0, 0.0, 0.0], 0.0, 1.0).unwrap(),
        Some(1)
    );
    // Bandwidth enters inversely: a starving route is avoided.
    let cands = [(1.0, 0.0, 0.01), (1.0, 0.0, 10.0)];
    assert_eq!(
        pick_route(&cands, [1.0, 0.0, 1.0], 0.0, 1.0).unwrap(),
        Some(1)
    );
}

#[test]
fn empty_route_candidates_are_an_error() {
    assert!(matches!(
        pick_route(&[], [1.0, 0.0, 0.0], 0.0, 1.0),
        Err(Error::EmptyCandidates { .. })
    ));
}

#[test]
fn subchannel_activates_the_best_rate_or_none() {
    assert_eq!(schedule_subchannel(&[1.0, 2.0]), Some((1, 2.0)));
    assert_eq!(schedule_subchannel(&[0.0, 0.0]), None);
    assert_eq!(schedule_subchannel(&[3.0, 3.0]), Some((0, 3.0)));
}

// -------------------------------------------------------------- allocation

#[test]
fn single_task_share_matches_the_grid_search_oracle() {
    // J(pi) = alpha*w*work/pi + r/2 pi^2 has its interior optimum where
    // r*pi^3 = alpha*w*work. Grid search is the independent oracle.
    let tasks = [task(2.0, 1.5)];
    let mut state = FogState::new(100.0, 10.0);
    state.dual_lambda = 0.0;
    let ridge = 1e-3;
    let alpha = 1.0;
    let out = allocate(&tasks, &state, (alpha, 0.0, 0.0), 2.0, ridge, 20_000).unwrap();
    let objective = |pi: f64| alpha * 2.0 * 1.5 / pi + 0.5 * ridge * pi * pi;
    let mut best = f64::INFINITY;
    let mut best_pi = 0.0;
    let mut pi = 1e-3;
    while pi < 100.0 {
        let j = objective(pi);
        if j < best {
            best = j;
            best_pi = pi;
        }
        pi += 1e-4;
    }
    assert!(
        (out.cpu_shares[0] - best_pi).abs() < 1e-3,
        "allocated {} vs grid {}",
        out.cpu_shares[0],
        best_pi
    );
    // Cross-check the analytic stationary point too.
    let analytic = (alpha * 2.0 * 1.5 / ridge).cbrt();
    assert!((out.cpu_shares[0] - analytic).abs() < 1e-4);
}

#[test]
fn zero_tasks_leave_state_unchanged_and_decay_the_dual() {
    let mut state = FogState::new(4.0, 2.0);
    state.dual_lambda = 5.0;
    let out = allocate(&[], &state, (1.0, 1.0, 1.0), 0.5, 1e-3, 100).unwrap();
    assert_eq!(out.cpu_shares.len(), 0);
    assert_eq!(out.dual_lambda, 0.0);
    assert_eq!(out.backlog_q, state.backlog_q);
    assert_eq!(out.energy_e, state.energy_e);
}

#[test]
fn identical_tasks_get_equal_shares() {
    let tasks = [task(1.0, 2.0), task(1.0, 2.0)];
    let state = FogState::new(3.0, 2.0);
    let out = allocate(&tasks, &state, (1.0, 0.0, 0.0), 0.1, 1e-3, 500).unwrap();
    assert!((out.cpu_shares[0] - out.cpu_shares[1]).abs() < 1e-6);
}

#[test]
fn binding_cpu_capacity_is_respected_and_prices_in() {
    // Demand pushes shares far past the cap: the projection pins the sum at
    // the cap and the dual becomes positive.
    let tasks = [task(5.0, 50.0), task(5.0, 50.0)];
    let state = FogState::new(1.0, 2.0);
    let out = allocate(&tasks, &state, (1.0, 0.0, 0.0), 0.05, 1e-3, 400).unwrap();
    assert!(out.cpu_shares.sum() <= 1.0 + 1e-9);
    assert!(out.dual_lambda > 0.0);
}

#[test]
fn slack_capacity_drives_the_dual_to_zero() {
    let tasks = [task(1.0, 1e-3)];
    let mut state = FogState::new(50.0, 10.0);
    state.dual_lambda = 2.0;
    let out = allocate(&tasks, &state, (1.0, 0.0, 0.0), 0.1, 1e-2, 100).unwrap();
    assert_eq!(out.dual_lambda, 0.0);
    assert!(out.cpu_shares.sum() < 50.0);
}

#[test]
fn cache_fractions_stay_in_the_unit_box_within_the_memory_cap() {
    let tasks: Vec<TaskDescriptor> = (0..4)
        .map(|k| TaskDescriptor {
            priority: 1.0 + k as f64,
            work: 1.0,
            energy_coef: 0.2,
            storage_coef: -2.0, // storage reward pushes kappa upward
        })
        .collect();
    let state = FogState::new(4.0, 1.5);
    let out = allocate(&tasks, &state, (0.4, 0.3, 0.3), 0.2, 1e-3, 300).unwrap();
    for k in 0..4 {
        assert!((0.0..=1.0).contains(&out.cache_frac[k]));
    }
    assert!(out.cache_frac.sum() <= 1.5 + 1e-9);
}

#[test]
fn objective_is_non_increasing_round_by_round_for_small_steps() {
    let tasks = [task(1.0, 2.0), task(2.0, 1.0), task(0.5, 4.0)];
    let ridge = 1e-3;
    let weights = (1.0, 0.0, 0.0);
    let mut state = allocate(&tasks, &FogState::new(30.0, 3.0), weights, 1e-3, ridge, 1).unwrap();
    let mut prev = fog_objective(&tasks, &state, weights, ridge);
    for _ in 0..200 {
        state = allocate(&tasks, &state, weights, 1e-3, ridge, 1).unwrap();
        let j = fog_objective(&tasks, &state, weights, ridge);
        assert!(j <= prev + 1e-9, "objective rose: {j} > {prev}");
        prev = j;
    }
}

// ------------------------------------------------------------ delay, cache

#[test]
fn fog_delay_closed_forms_and_overload() {
    assert_eq!(fog_delay(1.0, 2.0, 1.0, 0.5).unwrap(), 1.5);
    assert_eq!(fog_delay(0.0, 2.0, 1.0, 0.0).unwrap(), 0.0);
    assert!(matches!(
        fog_delay(1.0, 1.0, 1.0, 0.0),
        Err(Error::Overload { .. })
    ));
    assert!(matches!(
        fog_delay(1.0, 0.5, 1.0, 0.0),
        Err(Error::Overload { .. })
    ));
}

#[test]
fn fog_delay_is_positive_under_load() {
    let mut r = rng::stream(6, "test.delay");
    for _ in 0..1000 {
        let z: f64 = r.gen_range(0.0..10.0);
        let delta: f64 = r.gen_range(0.0..1.0);
        let lam: f64 = r.gen_range(0.0..5.0);
        let mu = lam + r.gen_range(0.1..5.0);
        let d = fog_delay(z, mu, lam, delta).unwrap();
        if z > 0.0 || delta > 0.0 {
            assert!(d > 0.0);
        }
    }
}

#[test]
fn cache_hit_closed_forms_and_monotonicity() {
    assert_eq!(cache_hit(0.0, 5.0), 0.0);
    assert!((cache_hit(1.0, 2f64.ln()) - 0.5).abs() < 1e-12);
    let mut prev = -1.0;
    for i in 0..100 {
        let h = cache_hit(0.3, i as f64 * 0.1);
        assert!((0.0..1.0).contains(&h));
        assert!(h >= prev);
        prev = h;
    }
}

// -------------------------------------------------------------------- tick

#[test]
fn balanced_arrivals_and_service_leave_the_backlog_unchanged() {
    let mut state = FogState::new(4.0, 2.0);
    state.backlog_q = 7.0;
    let (next, _) = fog_tick(&state, 3.0, 3.0, &[], &[], &FogTickCoefs::default());
    assert_eq!(next.backlog_q, 7.0);
}

#[test]
fn service_overshoot_clamps_the_backlog_at_zero() {
    let mut state = FogState::new(4.0, 2.0);
    state.backlog_q = 1.0;
    let (next, _) = fog_tick(&state, 0.0, 5.0, &[], &[], &FogTickCoefs::default());
    assert_eq!(next.backlog_q, 0.0);
}

#[test]
fn energy_ledger_charges_cpu_and_radio() {
    let mut state = FogState::new(4.0, 2.0);
    state.cpu_shares = DVector::from_row_slice(&[1.0, 2.0]);
    state.energy_e = 10.0;
    let coefs = FogTickCoefs {
        eta_cpu: 0.5,
        eta_tx: 1e-6,
        ..FogTickCoefs::default()
    };
    let (next, _) = fog_tick(&state, 0.0, 0.0, &[1e6, 2e6], &[], &coefs);
    assert!((next.energy_e - (10.0 + 1.5 + 3.0)).abs() < 1e-9);
}

#[test]
fn alerts_fire_for_hazards_at_or_above_the_threshold() {
    let state = FogState::new(4.0, 2.0);
    let coefs = FogTickCoefs {
        alert_threshold: 3.0,
        ..FogTickCoefs::default()
    };
    let (_, report) = fog_tick(&state, 0.0, 0.0, &[], &[1.0, 3.0, 5.0, 2.9], &coefs);
    assert_eq!(report.alerts, vec![1, 2]);
}

#[test]
fn drift_violations_are_counted_not_fatal() {
    let state = FogState::new(4.0, 2.0);
    // Large arrival burst with chi small: V rises beyond the budget.
    let coefs = FogTickCoefs {
        lyapunov_chi: 1e-6,
        ..FogTickCoefs::default()
    };
    let (next, report) = fog_tick(&state, 10.0, 0.0, &[], &[], &coefs);
    assert!(!report.lyapunov_ok);
    assert_eq!(next.lyapunov_violations, 1);
    // A quiet tick afterwards passes and the count sticks.
    let (next2, report2) = fog_tick(&next, 0.0, 5.0, &[], &[], &coefs);
    assert!(report2.lyapunov_ok);
    assert_eq!(next2.lyapunov_violations, 1);
}

#[test]
fn fog_ticks_are_deterministic() {
    let mut state = FogState::new(4.0, 2.0);
    state.cpu_shares = DVector::from_row_slice(&[0.5, 0.25]);
    state.backlog_q = 2.0;
    let coefs = FogTickCoefs::default();
    let a = fog_tick(&state, 1.5, 0.5, &[1e6], &[3.5], &coefs);
    let b = fog_tick(&state, 1.5, 0.5, &[1e6], &[3.5], &coefs);
    assert_eq!(a, b);
}
