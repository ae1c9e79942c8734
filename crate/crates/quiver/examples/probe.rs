//! Calibration probe: paired variant deltas on desk scenarios.
//! Scratch tool, not part of the shipped surface.

use quiver::sim::{run_scenario, scenario, Scale, Scenario, Variant};
use std::time::Instant;

fn main() {
    let scenarios: Vec<Scenario> = std::env::args()
        .nth(1)
        .map(|s| {
            s.split(',')
                .map(|x| x.parse::<Scenario>().expect("scenario"))
                .collect()
        })
        .unwrap_or_else(|| Scenario::ALL.to_vec());
    let seeds: Vec<u64> = std::env::args()
        .nth(2)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![11]);
    let variants = [
        Variant::Full,
        Variant::NoCvar,
        Variant::FixedTemp,
        Variant::NoEntangle,
        Variant::GreedyAssign,
        Variant::NoProj,
    ];

    for &seed in &seeds {
        println!("== seed {seed}");
        let mut pooled = vec![0.0f64; variants.len()];
        for &sc in &scenarios {
            print!("{sc:?}:");
            for (vi, &var) in variants.iter().enumerate() {
                let mut cfg = scenario(sc, Scale::Desk);
                cfg.variant = var;
                cfg.seed = seed;
                let t0 = Instant::now();
                let rep = run_scenario(&cfg).expect("run");
                let lat = rep.mean_latency_ms.unwrap_or(f64::NAN);
                pooled[vi] += lat / scenarios.len() as f64;
                print!(
                    " {:?}={:.2}ms/pdr{:.1}/rel{:.1}/att{:.2}/nci{:.1} ({:.2}s)",
                    var,
                    lat,
                    rep.pdr_pct,
                    rep.reliability_pct,
                    rep.att_min.unwrap_or(f64::NAN),
                    rep.nci_pct,
                    t0.elapsed().as_secs_f64()
                );
            }
            println!();
        }
        print!("pooled:");
        for (vi, &var) in variants.iter().enumerate() {
            print!(" {var:?}={:.3}", pooled[vi]);
        }
        println!();
    }
}
