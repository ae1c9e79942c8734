//! Fog-node layer: aggregation of vehicle reports, privacy-noised sketching,
//! hazard scoring, detour and subchannel selection, CPU/cache allocation via
//! proximal-gradient with dual ascent, and per-tick queue/energy/alert
//! accounting.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

/// Mutable fog-node state.
#[derive(Debug, Clone, PartialEq)]
pub struct FogState {
    /// Packet/work backlog; never negative.
    pub backlog_q: f64,
    /// CPU share per task; sums to at most `cap_cpu`.
    pub cpu_shares: DVector<f64>,
    /// Cached fraction per task, each in [0, 1], summing to at most `cap_mem`.
    pub cache_frac: DVector<f64>,
    /// Nonnegative dual price on the CPU capacity.
    pub dual_lambda: f64,
    /// Cumulative energy; never decreases.
    pub energy_e: f64,
    pub cap_cpu: f64,
    pub cap_mem: f64,
    /// Logged (not enforced) drift-condition failures.
    pub lyapunov_violations: usize,
}

impl FogState {
    pub fn new(cap_cpu: f64, cap_mem: f64) -> Self {
        FogState {
            backlog_q: 0.0,
            cpu_shares: DVector::zeros(0),
            cache_frac: DVector::zeros(0),
            dual_lambda: 0.0,
            energy_e: 0.0,
            cap_cpu,
            cap_mem,
            lyapunov_violations: 0,
        }
    }
}

/// One offloaded task's priority and cost coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    /// Positive priority.
    pub priority: f64,
    /// Work volume; the latency model is `work / cpu_share`.
    pub work: f64,
    /// Linear energy cost per unit CPU share.
    pub energy_coef: f64,
    /// Linear storage cost per unit cached fraction.
    pub storage_coef: f64,
}

/// Fused fog input `z = sum_i W_i y_i + U ybar`.
pub fn aggregate(
    inputs: &[(DMatrix<f64>, DVector<f64>)],
    u: &DMatrix<f64>,
    ybar: &DVector<f64>,
) -> Result<DVector<f64>> {
    if u.ncols() != ybar.len() {
        return Err(Error::DimMismatch {
            context: "fog aggregation",
            detail: format!("U is {}x{} but ybar has {}", u.nrows(), u.ncols(), ybar.len()),
        });
    }
    let dim = u.nrows();
    let mut z = u * ybar;
    for (i, (w, y)) in inputs.iter().enumerate() {
        if w.nrows() != dim || w.ncols() != y.len() {
            return Err(Error::DimMismatch {
                context: "fog aggregation",
                detail: format!(
                    "input {i}: W is {}x{}, y has {}, output dim {dim}",
                    w.nrows(),
                    w.ncols(),
                    y.len()
                ),
            });
        }
        z += w * y;
    }
    Ok(z)
}

/// Bounded sketch `s = P tanh(Omega z + b)`; every entry of the tanh lies in
/// (-1, 1), so `|s_i|` is bounded by the absolute row sum of `P`.
pub fn sketch(
    z: &DVector<f64>,
    p: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    if omega.ncols() != z.len() || omega.nrows() != b.len() || p.ncols() != b.len() {
        return Err(Error::DimMismatch {
            context: "fog sketch",
            detail: format!(
                "Omega {}x{}, z {}, b {}, P {}x{}",
                omega.nrows(),
                omega.ncols(),
                z.len(),
                b.len(),
                p.nrows(),
                p.ncols()
            ),
        });
    }
    let mut inner = omega * z + b;
    for v in inner.iter_mut() {
        *v = v.tanh();
    }
    Ok(p * inner)
}

/// Additive Gaussian noising `s + sigma * eps` with `eps` standard normal
/// from the labeled stream of `seed`; `sigma = 0` is the exact identity.
pub fn privatize(s: &DVector<f64>, sigma: f64, seed: u64) -> DVector<f64> {
    debug_assert!(sigma >= 0.0);
    if sigma == 0.0 {
        return s.clone();
    }
    let mut r = rng::stream(seed, "fog.privatize");
    DVector::from_fn(s.len(), |i, _| {
        let eps: f64 = r.sample(StandardNormal);
        s[i] + sigma * eps
    })
}

/// Smooth hazard score `softplus(alpha * |D z|_1 + beta)`, overflow-safe:
/// for arguments above 30 the softplus is its argument to double precision.
pub fn hazard_score(z: &DVector<f64>, d: &DMatrix<f64>, alpha: f64, beta: f64) -> f64 {
    assert_eq!(d.ncols(), z.len(), "hazard detector shape mismatch");
    let l1 = (d * z).iter().map(|v| v.abs()).sum::<f64>();
    softplus(alpha * l1 + beta)
}

fn softplus(a: f64) -> f64 {
    if a > 30.0 {
        a
    } else {
        (1.0 + a.exp()).ln()
    }
}

/// Detour choice: score each candidate `(travel_time, congestion, bandwidth)`
/// as `w1*T + w2*c + w3/b` and return the argmin (ties to the lowest index),
/// gated on the hazard clearing the threshold: `None` when the gate fails.
pub fn pick_route(
    candidates: &[(f64, f64, f64)],
    weights: [f64; 3],
    hazard: f64,
    hazard_threshold: f64,
) -> Result<Option<usize>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates {
            context: "detour candidates",
        });
    }
    if hazard > hazard_threshold {
        return Ok(None);
    }
    let mut best = 0usize;
    let mut best_score = f64::INFINITY;
    for (i, &(t, c, b)) in candidates.iter().enumerate() {
        let score = weights[0] * t + weights[1] * c + weights[2] / b;
        if score < best_score {
            best_score = score;
            best = i;
        }
    }
    Ok(Some(best))
}

/// Activates at most one subchannel: the best positive rate (ties to the
/// lowest index), or `None` when no channel offers a positive rate.
pub fn schedule_subchannel(rates_per_channel: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &r) in rates_per_channel.iter().enumerate() {
        if r > 0.0 && best.map_or(true, |(_, br)| r > br) {
            best = Some((i, r));
        }
    }
    best
}

/// Priority-weighted fog objective used by `allocate`:
/// `sum_k w_k (alpha*work_k/pi_k + beta*E_k*pi_k + gamma*S_k*kappa_k)`
/// plus the ridge regularizer `r/2 (|pi|^2 + |kappa|^2)`.
pub fn fog_objective(
    tasks: &[TaskDescriptor],
    state: &FogState,
    weights: (f64, f64, f64),
    ridge: f64,
) -> f64 {
    let (alpha, beta, gamma) = weights;
    let mut j = 0.0;
    for (k, t) in tasks.iter().enumerate() {
        let pi = state.cpu_shares[k].max(1e-12);
        let kappa = state.cache_frac[k];
        j += t.priority * (alpha * t.work / pi + beta * t.energy_coef * pi + gamma * t.storage_coef * kappa);
    }
    j + 0.5 * ridge * (state.cpu_shares.norm_squared() + state.cache_frac.norm_squared())
}

/// CPU/cache allocation: `rounds` iterations of a proximal-gradient step on
/// the priority-weighted objective (latency modeled as `work/pi`, ridge
/// regularizer applied through its closed-form shrinkage prox), dual ascent
/// on the CPU capacity, then clipping the cache fractions to [0, 1] and
/// rescaling both resources into their caps.
///
/// When the share vectors do not match the task count they are re-seeded
/// uniformly at `cap/n` (capped at 1 for cache fractions).
pub fn allocate(
    tasks: &[TaskDescriptor],
    state: &FogState,
    weights: (f64, f64, f64),
    eta: f64,
    ridge: f64,
    rounds: usize,
) -> Result<FogState> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::config(vec![format!(
            "allocation step must be positive and finite, got {eta}"
        )]));
    }
    for (k, t) in tasks.iter().enumerate() {
        if !(t.priority > 0.0) {
            return Err(Error::config(vec![format!(
                "task {k}: priority must be positive, got {}",
                t.priority
            )]));
        }
    }
    let (alpha, beta, gamma) = weights;
    let n = tasks.len();
    let mut s = state.clone();
    if s.cpu_shares.len() != n {
        s.cpu_shares = DVector::from_element(n, if n > 0 { s.cap_cpu / n as f64 } else { 0.0 });
    }
    if s.cache_frac.len() != n {
        s.cache_frac =
            DVector::from_element(n, if n > 0 { (s.cap_mem / n as f64).min(1.0) } else { 0.0 });
    }
    for _ in 0..rounds {
        // Proximal-gradient step on the Lagrangian's smooth part; the ridge
        // prox is the closed-form shrinkage v / (1 + eta*r).
        for k in 0..n {
            let t = &tasks[k];
            let pi = s.cpu_shares[k].max(1e-9);
            let grad_pi =
                t.priority * (-alpha * t.work / (pi * pi) + beta * t.energy_coef) + s.dual_lambda;
            let v = pi - eta * grad_pi;
            s.cpu_shares[k] = (v / (1.0 + eta * ridge)).max(1e-9);
            let grad_kappa = t.priority * gamma * t.storage_coef;
            let vk = s.cache_frac[k] - eta * grad_kappa;
            s.cache_frac[k] = vk / (1.0 + eta * ridge);
        }
        // Dual ascent on the CPU capacity.
        let used: f64 = s.cpu_shares.sum();
        s.dual_lambda = (s.dual_lambda + eta * (used - s.cap_cpu)).max(0.0);
        // Feasibility: cache fractions clipped to [0,1], both sums scaled
        // into their caps.
        for k in 0..n {
            s.cache_frac[k] = s.cache_frac[k].clamp(0.0, 1.0);
        }
        let used: f64 = s.cpu_shares.sum();
        if used > s.cap_cpu {
            s.cpu_shares *= s.cap_cpu / used;
        }
        let mem: f64 = s.cache_frac.sum();
        if mem > s.cap_mem {
            s.cache_frac *= s.cap_mem / mem;
        }
    }
    let cpu_violation = (s.cpu_shares.sum() - s.cap_cpu).max(0.0);
    let mem_violation = (s.cache_frac.sum() - s.cap_mem).max(0.0);
    if cpu_violation > 1e-6 || mem_violation > 1e-6 {
        return Err(Error::NotConverged {
            iterations: rounds,
            residual: cpu_violation.max(mem_violation),
        });
    }
    Ok(s)
}

/// Local delay `Z/(mu - Lambda) + Delta`; requires service to outpace
/// arrivals.
pub fn fog_delay(z: f64, mu: f64, lambda: f64, delta: f64) -> Result<f64> {
    if mu <= lambda {
        return Err(Error::Overload { mu, lambda });
    }
    Ok(z / (mu - lambda) + delta)
}

/// Cache hit probability `1 - exp(-nu * request_intensity)`, in [0, 1).
pub fn cache_hit(nu: f64, request_intensity: f64) -> f64 {
    debug_assert!(nu >= 0.0 && request_intensity >= 0.0);
    1.0 - (-nu * request_intensity).exp()
}

/// Energy and drift coefficients for `fog_tick`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FogTickCoefs {
    pub eta_cpu: f64,
    pub eta_tx: f64,
    /// Hazard level at which a vehicle triggers a local alert broadcast.
    pub alert_threshold: f64,
    pub lyapunov_lambda: f64,
    pub lyapunov_chi: f64,
}

impl Default for FogTickCoefs {
    fn default() -> Self {
        FogTickCoefs {
            eta_cpu: 1e-3,
            eta_tx: 1e-9,
            alert_threshold: 3.0,
            lyapunov_lambda: 1e-3,
            lyapunov_chi: 10.0,
        }
    }
}

/// What one fog tick reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct FogTickReport {
    /// Indices (into the hazard list) of vehicles alerted this tick.
    pub alerts: Vec<usize>,
    pub lyapunov_ok: bool,
}

/// One fog tick: backlog recursion `Q' = max(0, Q + A - S)`, energy ledger
/// `E' = E + eta_cpu*sum(pi) + eta_tx*sum(R)`, alert emission for hazards at
/// or above the threshold, and a logged (never enforced) drift check
/// `V' - V <= -lambda Q^2 + chi A^2` with `V = Q^2`.
pub fn fog_tick(
    state: &FogState,
    arrivals: f64,
    services: f64,
    tx_rates: &[f64],
    hazards: &[f64],
    coefs: &FogTickCoefs,
) -> (FogState, FogTickReport) {
    debug_assert!(arrivals >= 0.0 && services >= 0.0);
    let mut s = state.clone();
    let q_prev = s.backlog_q;
    s.backlog_q = (s.backlog_q + arrivals - services).max(0.0);
    s.energy_e += coefs.eta_cpu * s.cpu_shares.sum() + coefs.eta_tx * tx_rates.iter().sum::<f64>();
    let alerts: Vec<usize> = hazards
        .iter()
        .enumerate()
        .filter(|(_, &h)| h >= coefs.alert_threshold)
        .map(|(i, _)| i)
        .collect();
    let v_prev = q_prev * q_prev;
    let v_next = s.backlog_q * s.backlog_q;
    let lyapunov_ok = v_next - v_prev
        <= -coefs.lyapunov_lambda * q_prev * q_prev + coefs.lyapunov_chi * arrivals * arrivals;
    if !lyapunov_ok {
        s.lyapunov_violations += 1;
    }
    (s, FogTickReport { alerts, lyapunov_ok })
}
