//! Variance-driven annealing, soft plan policies, and seeded plan sampling.
//!
//! Temperature tracks the volatility of recent costs: stable costs cool the
//! system toward exploitation, volatile costs keep it exploratory. The
//! vehicle-side variant damps the variance term so bursty local costs do not
//! blow the temperature up. Soft policies are max-shifted Boltzmann weights,
//! and sampling is inverse-CDF over a labeled deterministic stream.

use std::collections::VecDeque;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::qstate::PlanDistribution;

/// Smallest admissible temperature.
pub const TEMPERATURE_FLOOR: f64 = 1e-6;
/// Default cost-history window.
pub const DEFAULT_WINDOW: usize = 16;

/// Which temperature recursion to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemperatureVariant {
    /// `T' = beta*T + (1-beta)*var`.
    Cloud,
    /// `T' = beta*T + (1-beta)*var/(1+var)`; damped for bursty local costs.
    Vehicle,
}

/// Temperature with its smoothing factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureState {
    pub value: f64,
    pub beta: f64,
}

impl TemperatureState {
    pub fn new(value: f64, beta: f64) -> Result<Self> {
        if !value.is_finite() || !beta.is_finite() || !(0.0..=1.0).contains(&beta) || value < 0.0 {
            return Err(Error::NonFinite {
                context: "temperature state",
            });
        }
        Ok(TemperatureState {
            value: value.max(TEMPERATURE_FLOOR),
            beta,
        })
    }
}

/// Sliding window of recent scalar costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostHistory {
    window: usize,
    buf: VecDeque<f64>,
}

impl CostHistory {
    pub fn new(window: usize) -> Self {
        CostHistory {
            window: window.max(1),
            buf: VecDeque::new(),
        }
    }

    pub fn push(&mut self, cost: f64) {
        if self.buf.len() == self.window {
            self.buf.pop_front();
        }
        self.buf.push_back(cost);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Population variance over the window (0 for fewer than two entries).
    pub fn variance(&self) -> f64 {
        let n = self.buf.len();
        if n < 2 {
            return 0.0;
        }
        let mean: f64 = self.buf.iter().sum::<f64>() / n as f64;
        self.buf.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64
    }
}

/// One temperature update from the recent cost variance, clamped to the floor.
pub fn update_temperature(
    state: TemperatureState,
    history: &CostHistory,
    variant: TemperatureVariant,
) -> TemperatureState {
    let var = history.variance();
    let drive = match variant {
        TemperatureVariant::Cloud => var,
        TemperatureVariant::Vehicle => var / (1.0 + var),
    };
    let next = state.beta * state.value + (1.0 - state.beta) * drive;
    TemperatureState {
        value: next.max(TEMPERATURE_FLOOR),
        beta: state.beta,
    }
}

/// Max-shifted Boltzmann policy `pi_k ~ exp(-(h_k - min h)/T)`.
///
/// The shift makes the computation overflow-safe and leaves the distribution
/// unchanged (shift invariance is exact, not approximate). Temperatures below
/// the floor are clamped.
pub fn soft_policy(costs: &DVector<f64>, temperature: f64) -> Result<PlanDistribution> {
    if costs.is_empty() {
        return Err(Error::EmptyCandidates {
            context: "soft policy",
        });
    }
    if costs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "soft policy costs",
        });
    }
    let t = temperature.max(TEMPERATURE_FLOOR);
    let m = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let w = costs.map(|h| (-(h - m) / t).exp());
    let s: f64 = w.iter().sum();
    PlanDistribution::try_from_vector(w / s)
}

/// Inverse-CDF sample from a plan distribution over the labeled stream for
/// `seed`. Same seed, same distribution: same index on every platform.
pub fn sample_plan(pi: &PlanDistribution, seed: u64) -> usize {
    let mut rng = crate::rng::stream(seed, "anneal.sample");
    let u: f64 = rng.gen();
    let p = pi.as_slice();
    let mut cum = 0.0;
    for (k, &w) in p.iter().enumerate() {
        cum += w;
        if u < cum {
            return k;
        }
    }
    p.len() - 1
}

impl PlanDistribution {
    /// Validates and wraps a probability vector.
    pub fn try_from_vector(v: DVector<f64>) -> Result<PlanDistribution> {
        if v.is_empty() {
            return Err(Error::EmptyCandidates {
                context: "plan distribution",
            });
        }
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::NonFinite {
                context: "plan distribution",
            });
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMarginals(format!(
                "distribution sums to {s}, expected 1"
            )));
        }
        Ok(PlanDistribution::new_unchecked(v / s))
    }
}
