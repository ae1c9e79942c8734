//! Per-vehicle edge stack: kinematics, belief filtering, messaging, link and
//! queue models, risk-aware micro-actions with safety filtering, offloading,
//! consensus, and stability checks.
//!
//! `step_vehicle` runs the whole per-tick sequence; the individual operations
//! are public so the simulator and tests can drive them directly. Every
//! stochastic element draws from a labeled stream derived from an explicit
//! seed, so equal seeds give bit-identical behavior.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anneal::{update_temperature, CostHistory, TemperatureState, TemperatureVariant};
use crate::qstate::{
    collapse_plan, entangle_neighbors, normalize, probabilities, Amplitudes, NORM_FLOOR,
};
use crate::{rng, Error, Result};

/// Per-link radio and queueing measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub snr_db: f64,
    pub distance_m: f64,
    pub payload_bits: f64,
    pub phy_rate_bps: f64,
    pub neighbor_queue: f64,
    pub neighbor_service_rate: f64,
}

/// Longitudinal acceleration plus a discrete lane decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroAction {
    pub accel: f64,
    /// -1 left, 0 keep, +1 right.
    pub lane_change: i8,
}

impl MicroAction {
    pub fn coast() -> Self {
        MicroAction {
            accel: 0.0,
            lane_change: 0,
        }
    }
}

/// Linear dynamics and observation model.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    /// State transition.
    pub phi: DMatrix<f64>,
    /// Control injection.
    pub gamma: DVector<f64>,
    /// Influence of each received message on the state.
    pub msg_gain: DMatrix<f64>,
    /// Observation map.
    pub obs: DMatrix<f64>,
    /// Process-noise bound (uniform in +-w_max per coordinate).
    pub w_max: f64,
    /// Observation-noise bound (uniform per coordinate).
    pub v_max: f64,
    /// Tick length in seconds.
    pub dt: f64,
}

impl DynamicsConfig {
    /// Longitudinal double integrator (position m, speed m/s) with Euler
    /// discretization and identity observation. Planar pose is tracked by the
    /// caller; on a road segment the along-track coordinate is what the
    /// controller acts on.
    pub fn longitudinal(dt: f64) -> Self {
        DynamicsConfig {
            phi: DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
            gamma: DVector::from_row_slice(&[0.0, dt]),
            msg_gain: DMatrix::zeros(2, 2),
            obs: DMatrix::identity(2, 2),
            w_max: 0.0,
            v_max: 0.0,
            dt,
        }
    }
}

/// Full vehicle-layer configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleConfig {
    pub dynamics: DynamicsConfig,
    /// Measurement-noise covariance for the belief update.
    pub obs_noise_cov: DMatrix<f64>,
    /// Sparsity cap for outgoing messages.
    pub msg_cap: usize,
    /// Link admission thresholds.
    pub gamma_th_db: f64,
    pub d_max_m: f64,
    pub deadline_s: f64,
    /// Packet-success curve.
    pub gamma0_db: f64,
    pub steepness: f64,
    pub coding_gain: f64,
    /// Risk-averse action selection.
    pub cvar_alpha: f64,
    pub cvar_samples: usize,
    /// Safety barrier.
    pub kappa: f64,
    pub u_max: f64,
    pub d_safe: f64,
    /// Energy-ledger coefficients.
    pub chi_drive: f64,
    pub chi_comm: f64,
    /// Link-state multiplicative update step.
    pub psi_eta: f64,
    /// Collapse trigger: collapse when the link cost jumps by at least this.
    pub collapse_threshold: f64,
    /// Offload advantage threshold (seconds).
    pub offload_delta: f64,
    /// Speed-tracking feedback gain for the control map.
    pub k_speed: f64,
    /// One-step KKT refinement: curvature of the comfort surrogate and step.
    pub kkt_rate: f64,
    /// Lyapunov margins.
    pub lyapunov_lambda: f64,
    pub lyapunov_chi: f64,
    /// Priority blend (safety, fault risk, staleness).
    pub priority_alphas: [f64; 3],
}

impl Default for VehicleConfig {
    fn default() -> Self {
        VehicleConfig {
            dynamics: DynamicsConfig::longitudinal(0.1),
            obs_noise_cov: DMatrix::identity(2, 2) * 0.25,
            msg_cap: 2,
            gamma_th_db: 5.0,
            d_max_m: 300.0,
            deadline_s: 0.05,
            gamma0_db: 5.0,
            steepness: 1.0,
            coding_gain: 0.98,
            cvar_alpha: 0.95,
            cvar_samples: 64,
            kappa: 1.0,
            u_max: 3.0,
            d_safe: 5.0,
            chi_drive: 1e-3,
            chi_comm: 1e-9,
            psi_eta: 0.5,
            collapse_threshold: 0.5,
            offload_delta: 0.005,
            k_speed: 0.8,
            kkt_rate: 0.1,
            lyapunov_lambda: 1e-3,
            lyapunov_chi: 10.0,
            priority_alphas: [0.6, 0.25, 0.15],
        }
    }
}

/// Mutable per-vehicle state.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    /// True kinematic state (position, speed along the current segment).
    pub x: DVector<f64>,
    pub belief_mean: DVector<f64>,
    pub belief_cov: DMatrix<f64>,
    /// Queued packets.
    pub queue_q: f64,
    /// Cumulative energy (J); never decreases.
    pub energy_e: f64,
    /// Superposition over candidate links.
    pub psi: Amplitudes,
    pub temperature: TemperatureState,
    /// Consensus variable shared with neighbors.
    pub consensus_xi: DVector<f64>,
    /// Current safety margin (m); tightened on Lyapunov violations.
    pub d_safe: f64,
    /// Current link-update step; halved on Lyapunov violations.
    pub psi_eta: f64,
    /// Held micro-action between decision ticks.
    pub last_action: MicroAction,
    /// Previous tick's link cost, for the collapse trigger.
    pub cost_prev: Option<f64>,
    /// Previous tick's Lyapunov value.
    pub lyapunov_prev: Option<f64>,
    /// Recent link costs driving the temperature schedule.
    pub cost_history: CostHistory,
}

impl VehicleState {
    /// Fresh state at a given kinematic start, with `n_links` candidate links
    /// and a consensus variable of dimension `xi_dim`.
    pub fn new(x: DVector<f64>, n_links: usize, xi_dim: usize, cfg: &VehicleConfig) -> Result<Self> {
        let dim = x.len();
        Ok(VehicleState {
            belief_mean: x.clone(),
            belief_cov: DMatrix::identity(dim, dim),
            x,
            queue_q: 0.0,
            energy_e: 0.0,
            psi: Amplitudes::uniform(n_links.max(1))?,
            temperature: TemperatureState::new(1.0, 0.9)?,
            consensus_xi: DVector::zeros(xi_dim),
            d_safe: cfg.d_safe,
            psi_eta: cfg.psi_eta,
            last_action: MicroAction::coast(),
            cost_prev: None,
            lyapunov_prev: None,
            cost_history: CostHistory::new(16),
        })
    }
}

/// Advances the kinematic state one tick and produces the noisy observation.
///
/// `x' = Phi x + Gamma u + sum_m B m + w`, `y = H x' + n`, both noise terms
/// uniform within their configured bounds, drawn from labeled streams of
/// `noise_seed`.
pub fn propagate_state(
    x: &DVector<f64>,
    control: &MicroAction,
    messages: &[DVector<f64>],
    noise_seed: u64,
    cfg: &DynamicsConfig,
) -> (DVector<f64>, DVector<f64>) {
    let mut next = &cfg.phi * x + &cfg.gamma * control.accel;
    for m in messages {
        next += &cfg.msg_gain * m;
    }
    if cfg.w_max > 0.0 {
        let mut r = rng::stream(noise_seed, "vehicle.noise.process");
        for v in next.iter_mut() {
            *v += r.gen_range(-cfg.w_max..=cfg.w_max);
        }
    }
    let mut y = &cfg.obs * &next;
    if cfg.v_max > 0.0 {
        let mut r = rng::stream(noise_seed, "vehicle.noise.obs");
        for v in y.iter_mut() {
            *v += r.gen_range(-cfg.v_max..=cfg.v_max);
        }
    }
    (next, y)
}

/// Kalman measurement update of the Gaussian belief (the multiplicative
/// Gaussian update in closed form). Joseph-stabilized covariance keeps the
/// posterior symmetric PSD; the posterior covariance never exceeds the prior
/// in the Loewner order.
pub fn update_belief(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    y: &DVector<f64>,
    obs: &DMatrix<f64>,
    noise_cov: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let s = obs * cov * obs.transpose() + noise_cov;
    let s_inv = s.clone().try_inverse().ok_or(Error::SingularCovariance)?;
    let gain = cov * obs.transpose() * s_inv;
    let innovation = y - obs * mean;
    let mean_next = mean + &gain * innovation;
    let dim = mean.len();
    let ikh = DMatrix::identity(dim, dim) - &gain * obs;
    let cov_next = &ikh * cov * ikh.transpose() + &gain * noise_cov * gain.transpose();
    // Symmetrize away the last rounding asymmetry.
    let cov_next = (&cov_next + cov_next.transpose()) * 0.5;
    Ok((mean_next, cov_next))
}

/// Sparse outgoing message: keep belief entries inside `mask`, then keep the
/// `cap` largest magnitudes (ties to the lowest index).
pub fn make_message(belief_mean: &DVector<f64>, mask: &[usize], cap: usize) -> DVector<f64> {
    let dim = belief_mean.len();
    let mut m = DVector::zeros(dim);
    if cap == 0 {
        return m;
    }
    let mut kept: Vec<usize> = mask.iter().copied().filter(|&i| i < dim).collect();
    kept.sort_unstable();
    kept.dedup();
    if kept.len() > cap {
        // Stable sort keeps the lowest index first among equal magnitudes.
        kept.sort_by(|&a, &b| {
            belief_mean[b]
                .abs()
                .partial_cmp(&belief_mean[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        kept.truncate(cap);
    }
    for &i in &kept {
        m[i] = belief_mean[i];
    }
    m
}

/// Link admissibility, latency, and reliability.
///
/// Latency is transmission plus neighbor queueing: `l/r + q/mu`. The link is
/// admissible iff the SNR clears the threshold, the range is within bounds,
/// and the latency meets the deadline (all boundaries closed). Reliability is
/// the product of logistic margins in SNR (per dB) and range (per m).
pub fn link_admissible(
    m: &LinkMetrics,
    gamma_th_db: f64,
    d_max_m: f64,
    deadline_s: f64,
) -> (bool, f64, f64) {
    let latency = if m.phy_rate_bps > 0.0 && m.neighbor_service_rate > 0.0 {
        m.payload_bits / m.phy_rate_bps + m.neighbor_queue / m.neighbor_service_rate
    } else {
        f64::INFINITY
    };
    let admissible =
        m.snr_db >= gamma_th_db && m.distance_m <= d_max_m && latency <= deadline_s;
    let prob = logistic(m.snr_db - gamma_th_db) * logistic(d_max_m - m.distance_m);
    (admissible, latency, prob)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Packet delivery probability `coding_gain * sigmoid(steepness*(snr - gamma0))`.
pub fn packet_success(
    snr_db: f64,
    gamma0_db: f64,
    steepness: f64,
    coding_gain: f64,
) -> Result<f64> {
    if !(coding_gain > 0.0 && coding_gain <= 1.0) {
        return Err(Error::InvalidCodingGain(coding_gain));
    }
    Ok(coding_gain * logistic(steepness * (snr_db - gamma0_db)))
}

/// Queue recursion `q' = max(0, q - mu) + arrivals`.
pub fn update_queue(q: f64, service_mu: f64, arrivals: f64) -> f64 {
    (q - service_mu).max(0.0) + arrivals
}

/// Picks the PHY/MAC profile with the best achievable rate (ties to the
/// lowest index); `None` when no profile offers a positive rate.
pub fn select_phy_profile(rates_per_profile: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &r) in rates_per_profile.iter().enumerate() {
        if r > 0.0 && best.map_or(true, |(_, br)| r > br) {
            best = Some((i, r));
        }
    }
    best
}

/// Risk-averse action choice: for each action draws `n_samples` costs and
/// scores it by the mean of the `ceil((1-alpha)*n)` largest samples, then
/// returns the argmin action (ties to the lowest index). Deterministic per
/// seed: action `a` samples from the labeled substream `(seed, "vehicle.cvar", a)`.
pub fn cvar_policy<F>(
    actions: &[MicroAction],
    mut cost_sampler: F,
    alpha: f64,
    n_samples: usize,
    seed: u64,
) -> Result<(usize, MicroAction)>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> f64,
{
    if actions.is_empty() {
        return Err(Error::EmptyCandidates {
            context: "micro-actions",
        });
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidWeights(format!(
            "cvar alpha must be in [0,1), got {alpha}"
        )));
    }
    let need = (1.0 / (1.0 - alpha)).ceil() as usize;
    if n_samples < need {
        return Err(Error::TooFewSamples {
            need,
            got: n_samples,
        });
    }
    let tail = ((1.0 - alpha) * n_samples as f64).ceil().max(1.0) as usize;
    let mut best = 0usize;
    let mut best_cvar = f64::INFINITY;
    for (a, _) in actions.iter().enumerate() {
        let mut r = rng::substream(seed, "vehicle.cvar", a as u64);
        let mut samples: Vec<f64> = (0..n_samples).map(|_| cost_sampler(a, &mut r)).collect();
        samples.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
        let cvar = samples[..tail].iter().sum::<f64>() / tail as f64;
        if cvar < best_cvar {
            best_cvar = cvar;
            best = a;
        }
    }
    Ok((best, actions[best]))
}

/// Control-barrier safety filter on the longitudinal acceleration.
///
/// Barrier `h = gap - d_safe`, `hdot = -rel_speed - accel*dt`; when
/// `hdot + kappa*h < 0` the acceleration is reduced to the largest value in
/// `[-u_max, accel]` restoring the inequality, or `-u_max` if none exists.
/// `rel_speed` is the closing speed (positive = approaching the leader).
pub fn safety_filter(
    action: MicroAction,
    gap_m: f64,
    rel_speed: f64,
    kappa: f64,
    u_max: f64,
    d_safe: f64,
    dt: f64,
) -> MicroAction {
    debug_assert!(kappa > 0.0 && dt > 0.0 && u_max > 0.0);
    let h = gap_m - d_safe;
    let bound = (kappa * h - rel_speed) / dt;
    let accel = action.accel.min(bound).clamp(-u_max, u_max);
    MicroAction {
        accel,
        lane_change: action.lane_change,
    }
}

/// Aggregate KKT residual of a refined action: stationarity norm of the
/// Lagrangian gradient, complementary slackness, dual feasibility, and primal
/// feasibility. Zero iff all four hold.
pub fn kkt_residual(lagrangian_grad: &DVector<f64>, constraint_value: f64, multiplier: f64) -> f64 {
    lagrangian_grad.norm()
        + (multiplier * constraint_value).abs()
        + (-multiplier).max(0.0)
        + constraint_value.max(0.0)
}

/// Energy ledger: `e' = e + chi_drive*|u|^2 + chi_comm*sum(rates)`.
pub fn update_energy_ledger(
    e: f64,
    action: &MicroAction,
    tx_rates: &[f64],
    chi_drive: f64,
    chi_comm: f64,
) -> f64 {
    debug_assert!(chi_drive >= 0.0 && chi_comm >= 0.0);
    e + chi_drive * action.accel * action.accel + chi_comm * tx_rates.iter().sum::<f64>()
}

/// Multiplicative link-state update `psi' = exp(-eta*grad) .* psi`,
/// renormalized. Entries are floored at 1e-12 first so the multiplicative
/// form stays positive.
pub fn multiplicative_psi_update(
    psi: &Amplitudes,
    grad: &DVector<f64>,
    eta: f64,
) -> Result<Amplitudes> {
    if grad.len() != psi.len() {
        return Err(Error::LengthMismatch {
            context: "link update",
            expected: psi.len(),
            got: grad.len(),
        });
    }
    if !(eta > 0.0) {
        return Err(Error::NonFinite {
            context: "link update step",
        });
    }
    let v = DVector::from_fn(psi.len(), |i, _| {
        (-eta * grad[i]).exp() * psi.as_slice()[i].max(NORM_FLOOR)
    });
    normalize(&v)
}

/// Offload decision: offload iff the local-minus-fog latency advantage meets
/// the threshold; returns the resulting end-to-end task latency.
pub fn offload_decide(
    l_local: f64,
    l_upl: f64,
    l_proc: f64,
    l_down: f64,
    delta: f64,
) -> (bool, f64) {
    let fog = l_upl + l_proc + l_down;
    let offload = l_local - fog >= delta;
    (offload, if offload { fog } else { l_local })
}

/// Achievable rate `alpha * B * log2(1 + SINR)` for a bandwidth share.
pub fn shannon_rate(alpha_share: f64, bandwidth_hz: f64, sinr_linear: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&alpha_share));
    alpha_share * bandwidth_hz * (1.0 + sinr_linear).log2()
}

/// Priority score: weighted blend of safety urgency, fault risk, and message
/// staleness. Callers normalize across vehicles.
pub fn priority_weight(safety: f64, fault_risk: f64, staleness: f64, alphas: [f64; 3]) -> f64 {
    alphas[0] * safety + alphas[1] * fault_risk + alphas[2] * staleness
}

/// Metropolis weight matrix of an undirected graph given as an adjacency
/// list: `w_ij = 1/(1 + max(deg_i, deg_j))` on edges, diagonal holds the
/// remainder. Rows sum to one; the matrix is symmetric.
pub fn metropolis_weights(neighbors: &[Vec<usize>]) -> DMatrix<f64> {
    let n = neighbors.len();
    let mut w = DMatrix::zeros(n, n);
    for (i, nbrs) in neighbors.iter().enumerate() {
        for &j in nbrs {
            if j == i || j >= n {
                continue;
            }
            w[(i, j)] = 1.0 / (1.0 + neighbors[i].len().max(neighbors[j].len()) as f64);
        }
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    w
}

/// One synchronous consensus round over all agents:
/// `xi'_i = xi_i + sum_j w_ij (xi_j - xi_i) + eta_i (target_i - xi_i)`.
///
/// The weight matrix must be symmetric, elementwise nonnegative, and
/// row-stochastic within 1e-9 (the Metropolis construction guarantees this).
pub fn consensus_step(
    states: &[DVector<f64>],
    weights: &DMatrix<f64>,
    innovations: &[DVector<f64>],
    eta: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    let n = states.len();
    if weights.nrows() != n || weights.ncols() != n {
        return Err(Error::InvalidWeights(format!(
            "weight matrix {}x{} for {} agents",
            weights.nrows(),
            weights.ncols(),
            n
        )));
    }
    if innovations.len() != n || eta.len() != n {
        return Err(Error::InvalidWeights(
            "innovations and eta must match the agent count".to_string(),
        ));
    }
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            let wij = weights[(i, j)];
            if wij < 0.0 {
                return Err(Error::InvalidWeights(format!("negative weight at ({i},{j})")));
            }
            if (wij - weights[(j, i)]).abs() > 1e-12 {
                return Err(Error::InvalidWeights(format!("asymmetry at ({i},{j})")));
            }
            row += wij;
        }
        if (row - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights(format!("row {i} sums to {row}")));
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut next = states[i].clone();
        for j in 0..n {
            if j != i {
                next += (states[j].clone() - &states[i]) * weights[(i, j)];
            }
        }
        next += (innovations[i].clone() - &states[i]) * eta[i];
        out.push(next);
    }
    Ok(out)
}

/// Worst-case multi-hop delivery: the minimum over candidate paths of the
/// product of link probabilities, and whether it clears the floor.
pub fn robust_path_floor(link_probs_per_path: &[Vec<f64>], rho_min: f64) -> Result<(f64, bool)> {
    if link_probs_per_path.is_empty() {
        return Err(Error::EmptyPathSet);
    }
    let mut rho = f64::INFINITY;
    for path in link_probs_per_path {
        let p: f64 = path.iter().product();
        rho = rho.min(p);
    }
    Ok((rho, rho >= rho_min))
}

/// Drift condition `V_next - V_prev <= -lambda*|x|^2 + chi*|w|^2`.
pub fn lyapunov_check(
    v_next: f64,
    v_prev: f64,
    x_norm_sq: f64,
    w_norm_sq: f64,
    lambda_margin: f64,
    chi: f64,
) -> bool {
    debug_assert!(lambda_margin > 0.0 && chi > 0.0);
    v_next - v_prev <= -lambda_margin * x_norm_sq + chi * w_norm_sq
}

/// Immutable per-tick environment snapshot for one vehicle.
pub struct VehicleEnv<'a> {
    /// Candidate links this tick, aligned with the link superposition.
    pub links: &'a [LinkMetrics],
    /// Messages received from neighbors.
    pub neighbor_messages: &'a [DVector<f64>],
    /// Neighbor link superpositions for the entangling update.
    pub neighbor_psi: &'a [&'a Amplitudes],
    /// Entangling strengths, aligned with `neighbor_psi`.
    pub entangle_strengths: &'a [f64],
    /// Candidate micro-actions for the risk-averse policy.
    pub candidate_actions: &'a [MicroAction],
    /// Whether to re-decide the action this tick (else the held action runs).
    pub decide_action: bool,
    /// Per-action sampled stage cost (exogenous randomness comes from the rng).
    pub action_cost: &'a dyn Fn(usize, &mut ChaCha8Rng) -> f64,
    /// Gap to the leader (m) and closing speed (m/s).
    pub gap_m: f64,
    pub rel_speed: f64,
    /// Speed setpoint for the control map.
    pub v_target: f64,
    /// New packet arrivals this tick.
    pub arrivals_packets: f64,
    /// Achievable rates per PHY profile.
    pub phy_rates: &'a [f64],
    /// Offload latencies (local compute, uplink, fog processing, downlink).
    pub l_local: f64,
    pub l_upl: f64,
    pub l_proc: f64,
    pub l_down: f64,
    /// Bandwidth share and radio quality for the rate computation.
    pub alpha_share: f64,
    pub bandwidth_hz: f64,
    pub sinr_linear: f64,
    /// Priority inputs.
    pub safety: f64,
    pub fault_risk: f64,
    pub staleness: f64,
    /// Consensus neighborhood: neighbor states, Metropolis weights to them,
    /// innovation target and gain.
    pub neighbor_xi: &'a [DVector<f64>],
    pub consensus_weights: &'a [f64],
    pub consensus_eta: f64,
    pub xi_target: &'a DVector<f64>,
    /// Candidate multi-hop paths (per-link success probabilities).
    pub candidate_paths: &'a [Vec<f64>],
    pub rho_min: f64,
    /// Disturbance magnitude for the drift check.
    pub disturbance_sq: f64,
    /// Seed for every stochastic element of this tick.
    pub seed: u64,
}

/// Everything a tick reports back to the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleOutputs {
    pub observation: DVector<f64>,
    pub message: DVector<f64>,
    /// Chosen link (argmax of gated activation; best-probability fallback
    /// when nothing is admissible).
    pub link: Option<usize>,
    /// False when transmission was deferred (no admissible link).
    pub transmitted: bool,
    pub link_latency_s: f64,
    pub link_prob: f64,
    pub phy: Option<(usize, f64)>,
    pub action: MicroAction,
    pub kkt_residual: f64,
    pub offloaded: bool,
    pub task_latency_s: f64,
    pub rate_bps: f64,
    pub priority: f64,
    pub path_floor: f64,
    pub path_ok: bool,
    pub collapsed: bool,
    pub lyapunov_ok: bool,
}

/// Runs the full per-tick vehicle sequence; see the module docs for the
/// order. On a Lyapunov violation the safety margin grows by 10% and the
/// link-update step halves before the next tick.
pub fn step_vehicle(
    state: &VehicleState,
    env: &VehicleEnv<'_>,
    cfg: &VehicleConfig,
) -> Result<(VehicleState, VehicleOutputs)> {
    let mut s = state.clone();

    // Sense, predict, update.
    let (x_next, y) = propagate_state(
        &s.x,
        &s.last_action,
        env.neighbor_messages,
        env.seed,
        &cfg.dynamics,
    );
    s.x = x_next;
    let (mean, cov) = update_belief(
        &s.belief_mean,
        &s.belief_cov,
        &y,
        &cfg.dynamics.obs,
        &cfg.obs_noise_cov,
    )?;
    s.belief_mean = mean;
    s.belief_cov = cov;

    // Outgoing message.
    let full_mask: Vec<usize> = (0..s.belief_mean.len()).collect();
    let message = make_message(&s.belief_mean, &full_mask, cfg.msg_cap);

    // Link admissibility gate over the activation distribution.
    if s.psi.len() != env.links.len().max(1) {
        s.psi = Amplitudes::uniform(env.links.len().max(1))?;
    }
    let mut admissible = vec![false; env.links.len()];
    let mut latencies = vec![f64::INFINITY; env.links.len()];
    let mut probs = vec![0.0; env.links.len()];
    for (i, lm) in env.links.iter().enumerate() {
        let (adm, lat, prob) = link_admissible(lm, cfg.gamma_th_db, cfg.d_max_m, cfg.deadline_s);
        admissible[i] = adm;
        latencies[i] = lat;
        probs[i] = prob;
    }
    let theta = probabilities(&s.psi);
    let any_admissible = admissible.iter().any(|&a| a);
    let (link, transmitted) = if env.links.is_empty() {
        (None, false)
    } else if any_admissible {
        // Activation mass renormalized over admissible links: argmax wins.
        let mut best = None;
        let mut best_mass = -1.0;
        for i in 0..env.links.len() {
            if admissible[i] && theta.get(i) > best_mass {
                best_mass = theta.get(i);
                best = Some(i);
            }
        }
        (best, true)
    } else {
        // Defer transmission; record the best link by reliability.
        let mut best = 0;
        for i in 1..env.links.len() {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        (Some(best), false)
    };
    let (link_latency_s, link_prob) = match link {
        Some(i) => (latencies[i], probs[i]),
        None => (f64::INFINITY, 0.0),
    };

    // Queue service through the selected PHY profile.
    let phy = select_phy_profile(env.phy_rates);
    let payload_bits = env
        .links
        .first()
        .map(|l| l.payload_bits)
        .unwrap_or(256.0 * 8.0);
    let service_mu = match (transmitted, phy) {
        (true, Some((_, rate))) => rate * cfg.dynamics.dt / payload_bits,
        _ => 0.0,
    };
    s.queue_q = update_queue(s.queue_q, service_mu, env.arrivals_packets);

    // Risk-averse action, safety-filtered, with one KKT refinement step.
    let decided = if env.decide_action && !env.candidate_actions.is_empty() {
        let (_, act) = cvar_policy(
            env.candidate_actions,
            |a, r| (env.action_cost)(a, r),
            cfg.cvar_alpha,
            cfg.cvar_samples,
            rng::mix(env.seed ^ 0x5eed_ac71),
        )?;
        act
    } else {
        s.last_action
    };
    let speed = s.belief_mean[s.belief_mean.len().min(2) - 1];
    let feedback = cfg.k_speed * (env.v_target - speed);
    let commanded = MicroAction {
        accel: (decided.accel + feedback).clamp(-cfg.u_max, cfg.u_max),
        lane_change: decided.lane_change,
    };
    let filtered = safety_filter(
        commanded,
        env.gap_m,
        env.rel_speed,
        cfg.kappa,
        cfg.u_max,
        s.d_safe,
        cfg.dynamics.dt,
    );
    // One projected-gradient step on the comfort surrogate J = a^2/2, then
    // re-projected through the barrier bound.
    let refined_raw = filtered.accel - cfg.kkt_rate * filtered.accel;
    let refined = safety_filter(
        MicroAction {
            accel: refined_raw,
            lane_change: filtered.lane_change,
        },
        env.gap_m,
        env.rel_speed,
        cfg.kappa,
        cfg.u_max,
        s.d_safe,
        cfg.dynamics.dt,
    );
    let cbf_bound = (cfg.kappa * (env.gap_m - s.d_safe) - env.rel_speed) / cfg.dynamics.dt;
    let active = refined.accel >= cbf_bound - 1e-12 && refined.accel <= cbf_bound + 1e-12;
    let grad_j = refined.accel;
    let multiplier = if active { (-grad_j).max(0.0) } else { 0.0 };
    let lagrangian_grad = DVector::from_element(1, grad_j + multiplier);
    let g_value = refined.accel - cbf_bound;
    let kkt = kkt_residual(&lagrangian_grad, g_value, multiplier);
    s.last_action = refined;

    // Energy ledger.
    let tx_rates = if transmitted {
        phy.map(|(_, r)| vec![r]).unwrap_or_default()
    } else {
        Vec::new()
    };
    s.energy_e = update_energy_ledger(s.energy_e, &refined, &tx_rates, cfg.chi_drive, cfg.chi_comm);

    // Link-state update: multiplicative step on latency-derived costs, then
    // neighborhood entangling and the annealed temperature.
    let mut collapsed = false;
    if !env.links.is_empty() {
        let link_costs = DVector::from_fn(env.links.len(), |i, _| {
            let lat = if latencies[i].is_finite() {
                latencies[i] / cfg.deadline_s
            } else {
                2.0
            };
            lat + (1.0 - probs[i])
        });
        let mut psi_next = multiplicative_psi_update(&s.psi, &link_costs, s.psi_eta)?;
        if !env.neighbor_psi.is_empty()
            && env.neighbor_psi.len() == env.entangle_strengths.len()
            && env.neighbor_psi.iter().all(|p| p.len() == psi_next.len())
        {
            psi_next = entangle_neighbors(&psi_next, env.neighbor_psi, env.entangle_strengths)?;
        }
        let cost_now = link_costs.min();
        if let Some(prev) = s.cost_prev {
            if cost_now - prev >= cfg.collapse_threshold {
                // Cost jump: collapse onto the currently best admissible link.
                let target = link.unwrap_or(0);
                psi_next = collapse_plan(target, psi_next.len())?;
                collapsed = true;
            }
        }
        s.cost_prev = Some(cost_now);
        s.cost_history.push(cost_now);
        s.temperature = update_temperature(s.temperature, &s.cost_history, TemperatureVariant::Vehicle);
        s.psi = psi_next;
    }

    // Offload, bandwidth, priority.
    let (offloaded, task_latency_s) =
        offload_decide(env.l_local, env.l_upl, env.l_proc, env.l_down, cfg.offload_delta);
    let rate_bps = shannon_rate(env.alpha_share, env.bandwidth_hz, env.sinr_linear);
    let priority = priority_weight(env.safety, env.fault_risk, env.staleness, cfg.priority_alphas);

    // Local consensus round against the neighbor snapshot.
    if !env.neighbor_xi.is_empty() && env.neighbor_xi.len() == env.consensus_weights.len() {
        let mut next = s.consensus_xi.clone();
        for (xi_j, &w) in env.neighbor_xi.iter().zip(env.consensus_weights) {
            if w < 0.0 {
                return Err(Error::InvalidWeights(format!("negative weight {w}")));
            }
            next += (xi_j.clone() - &s.consensus_xi) * w;
        }
        next += (env.xi_target.clone() - &s.consensus_xi) * env.consensus_eta;
        s.consensus_xi = next;
    }

    // Robust multi-hop floor.
    let (path_floor, path_ok) = if env.candidate_paths.is_empty() {
        (1.0, true)
    } else {
        robust_path_floor(env.candidate_paths, env.rho_min)?
    };

    // Drift check on speed tracking plus queue backlog; a violation tightens
    // the safety margin and halves the link step for the next tick.
    let err = env.v_target - speed;
    let v_now = 0.5 * err * err + 1e-3 * s.queue_q * s.queue_q;
    let lyapunov_ok = match s.lyapunov_prev {
        Some(prev) => lyapunov_check(
            v_now,
            prev,
            err * err,
            env.disturbance_sq,
            cfg.lyapunov_lambda,
            cfg.lyapunov_chi,
        ),
        None => true,
    };
    if !lyapunov_ok {
        s.d_safe *= 1.1;
        s.psi_eta = (s.psi_eta * 0.5).max(1e-6);
    }
    s.lyapunov_prev = Some(v_now);

    Ok((
        s,
        VehicleOutputs {
            observation: y,
            message,
            link,
            transmitted,
            link_latency_s,
            link_prob,
            phy,
            action: refined,
            kkt_residual: kkt,
            offloaded,
            task_latency_s,
            rate_bps,
            priority,
            path_floor,
            path_ok,
            collapsed,
            lyapunov_ok,
        },
    ))
}
