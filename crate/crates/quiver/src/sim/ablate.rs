//! Ablation studies: run a grid of scenarios x variants x repetitions and
//! summarize each cell.
//!
//! Every repetition is an independent deterministic job (its own seed), so
//! the grid runs on a work-stealing pool while the collected output stays
//! byte-for-byte reproducible: results are gathered in job order, not in
//! completion order.

use rayon::prelude::*;

use super::config::{ScenarioConfig, Variant};
use super::metrics::MetricsReport;
use super::run::{run_tuned, SimTuning};
use super::scenario::{apply_stressors, Scenario};
use super::world::build_world;
use crate::Result;

/// Mean and sample standard deviation over repetitions. With a single
/// repetition the deviation is reported as zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    /// How many repetitions actually carried this metric (latency and trip
    /// time are absent when nothing was delivered or completed).
    pub n: usize,
}

impl Stat {
    fn from_values(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Stat { mean, std, n }
    }
}

/// One (scenario, variant) cell of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub scenario: Scenario,
    pub variant: Variant,
    pub latency_ms: Stat,
    pub pdr_pct: Stat,
    pub reliability_pct: Stat,
    pub att_min: Stat,
    pub nci_pct: Stat,
    /// Per-repetition reports, in seed order, for paired comparisons.
    pub reports: Vec<MetricsReport>,
}

impl AblationCell {
    fn build(scenario: Scenario, variant: Variant, reports: Vec<MetricsReport>) -> AblationCell {
        let collect = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Vec<f64> {
            reports.iter().filter_map(|r| f(r)).collect()
        };
        AblationCell {
            scenario,
            variant,
            latency_ms: Stat::from_values(&collect(&|r| r.mean_latency_ms)),
            pdr_pct: Stat::from_values(&collect(&|r| Some(r.pdr_pct))),
            reliability_pct: Stat::from_values(&collect(&|r| Some(r.reliability_pct))),
            att_min: Stat::from_values(&collect(&|r| r.att_min)),
            nci_pct: Stat::from_values(&collect(&|r| Some(r.nci_pct))),
            reports,
        }
    }
}

/// Builds the configuration for one grid job.
pub fn cell_config(
    base: &ScenarioConfig,
    scenario: Scenario,
    variant: Variant,
    rep: usize,
) -> ScenarioConfig {
    let mut cfg = base.clone();
    apply_stressors(scenario, &mut cfg);
    cfg.variant = variant;
    cfg.seed = base.seed.wrapping_add(rep as u64);
    cfg
}

/// Runs the full grid with explicit model constants.
pub fn ablate_tuned(
    base: &ScenarioConfig,
    scenarios: &[Scenario],
    variants: &[Variant],
    reps: usize,
    tune: &SimTuning,
) -> Result<Vec<AblationCell>> {
    let mut jobs: Vec<(usize, ScenarioConfig)> = Vec::new();
    for (si, &s) in scenarios.iter().enumerate() {
        for (vi, &v) in variants.iter().enumerate() {
            for rep in 0..reps {
                let idx = (si * variants.len() + vi) * reps + rep;
                jobs.push((idx, cell_config(base, s, v, rep)));
            }
        }
    }
    let mut results: Vec<(usize, MetricsReport)> = jobs
        .into_par_iter()
        .map(|(idx, cfg)| {
            let world = build_world(&cfg)?;
            Ok((idx, run_tuned(&world, &cfg, tune)?))
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by_key(|(idx, _)| *idx);

    let mut cells = Vec::with_capacity(scenarios.len() * variants.len());
    let mut it = results.into_iter().map(|(_, r)| r);
    for &s in scenarios {
        for &v in variants {
            let reports: Vec<MetricsReport> = (&mut it).take(reps).collect();
            cells.push(AblationCell::build(s, v, reports));
        }
    }
    Ok(cells)
}

/// Runs the full grid with default model constants.
pub fn ablate(
    base: &ScenarioConfig,
    scenarios: &[Scenario],
    variants: &[Variant],
    reps: usize,
) -> Result<Vec<AblationCell>> {
    ablate_tuned(base, scenarios, variants, reps, &SimTuning::default())
}

/// Header for [`summary_csv`].
pub const SUMMARY_CSV_HEADER: &str = "scenario,variant,reps,latency_ms_mean,latency_ms_std,\
pdr_pct_mean,pdr_pct_std,reliability_pct_mean,reliability_pct_std,att_min_mean,att_min_std,\
nci_pct_mean,nci_pct_std";

/// One row per cell; absent metrics render as empty cells.
pub fn summary_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for c in cells {
        let opt = |s: &Stat| -> (String, String) {
            if s.n == 0 {
                (String::new(), String::new())
            } else {
                (format!("{:.6}", s.mean), format!("{:.6}", s.std))
            }
        };
        let (lm, ls) = opt(&c.latency_ms);
        let (am, a_s) = opt(&c.att_min);
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{:.6},{:.6}\n",
            c.scenario.name(),
            c.variant.name(),
            c.reports.len(),
            lm,
            ls,
            c.pdr_pct.mean,
            c.pdr_pct.std,
            c.reliability_pct.mean,
            c.reliability_pct.std,
            am,
            a_s,
            c.nci_pct.mean,
            c.nci_pct.std,
        ));
    }
    out
}

/// One-sided sign-test p-value: the probability of `wins` or more successes
/// in `trials` fair coin flips. Exact binomial tail, suitable for the trial
/// counts the ablation grid produces.
pub fn sign_test_p(wins: u64, trials: u64) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    if wins == 0 {
        return 1.0;
    }
    // pmf(0) = 0.5^n, pmf(k+1) = pmf(k) * (n-k)/(k+1).
    let n = trials as f64;
    let mut pmf = 0.5f64.powf(n);
    let mut tail = 0.0;
    for k in 0..=trials {
        if k >= wins {
            tail += pmf;
        }
        if k < trials {
            pmf *= (n - k as f64) / (k as f64 + 1.0);
        }
    }
    tail.min(1.0)
}

/// Paired comparison helper: counts the pairs where `a` is strictly less
/// than `b`, skipping pairs where either side is missing.
pub fn paired_wins(a: &[Option<f64>], b: &[Option<f64>]) -> (u64, u64) {
    let mut wins = 0;
    let mut trials = 0;
    for (x, y) in a.iter().zip(b.iter()) {
        if let (Some(x), Some(y)) = (x, y) {
            if x != y {
                trials += 1;
                if x < y {
                    wins += 1;
                }
            }
        }
    }
    (wins, trials)
}
