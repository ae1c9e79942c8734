//! Co-simulation behavior: determinism, conservation, conventions, scenario
//! presets, config round-trips, and stressor monotonicity.

use quiver::sim::{
    ablate, apply_stressors, build_world, run_scenario, run_tuned, scenario, Scale, Scenario,
    ScenarioConfig, SimTuning, Variant,
};

fn desk_small(seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.vehicles = 50;
    cfg.duration_s = 60.0;
    cfg.seed = seed;
    cfg
}

#[test]
fn smoke_run_prints_report() {
    let mut cfg = desk_small(7);
    cfg.duration_s = 60.0;
    let t0 = std::time::Instant::now();
    let report = run_scenario(&cfg).expect("run succeeds");
    let dt = t0.elapsed();
    println!(
        "smoke: latency={:?}ms pdr={:.2}% rel={:.2}% att={:?}min nci={:.2}% sent={} delivered={} dropped={} trips={} in {:?}",
        report.mean_latency_ms,
        report.pdr_pct,
        report.reliability_pct,
        report.att_min,
        report.nci_pct,
        report.counts.sent,
        report.counts.delivered,
        report.counts.dropped,
        report.counts.trips_completed,
        dt
    );
    assert!(report.counts.sent > 0);
    assert!(report.invariant_violations().is_empty());
}
