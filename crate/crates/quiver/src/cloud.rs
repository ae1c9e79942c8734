//! Cloud coordinator: confidence-weighted fusion of fog summaries, lifted
//! linear forecasting with a windowed ridge fit, sparse model updates,
//! multi-objective primal–dual iteration, multiplicative-weights population
//! search, entropic dispatch, and risk/stability gating with adaptive repair.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::anneal::{
    sample_plan, soft_policy, update_temperature, CostHistory, TemperatureState,
    TemperatureVariant,
};
use crate::qstate::PlanDistribution;
use crate::transport::{assign_greedy, sinkhorn, TransportPlan, TransportProblem};
use crate::{Error, Result};

/// How the dispatch coupling between fog capacity and regional demand is
/// computed during coordination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DispatchMethod {
    /// Entropy-regularized coupling with exact marginals.
    #[default]
    Entropic,
    /// Row-wise cheapest-column assignment (used for ablation studies).
    Greedy,
}

/// Fused summary `Z = sum_f A_f s_f`.
pub fn fuse(summaries: &[(DMatrix<f64>, DVector<f64>)]) -> Result<DVector<f64>> {
    let Some((first, _)) = summaries.split_first() else {
        return Err(Error::EmptyCandidates {
            context: "fog summaries",
        });
    };
    let dim = first.0.nrows();
    let mut z = DVector::zeros(dim);
    for (i, (a, s)) in summaries.iter().enumerate() {
        if a.nrows() != dim || a.ncols() != s.len() {
            return Err(Error::DimMismatch {
                context: "cloud fusion",
                detail: format!(
                    "summary {i}: A is {}x{}, s has {}, output dim {dim}",
                    a.nrows(),
                    a.ncols(),
                    s.len()
                ),
            });
        }
        z += a * s;
    }
    Ok(z)
}

/// Per-fog confidence: softmax of `-kappa1*variance - kappa2*latency`,
/// max-shifted for stability; sums to one.
pub fn confidence_weights(
    variances: &[f64],
    latencies: &[f64],
    kappas: (f64, f64),
) -> Result<DVector<f64>> {
    if variances.len() != latencies.len() || variances.is_empty() {
        return Err(Error::LengthMismatch {
            context: "confidence weights",
            expected: variances.len().max(1),
            got: latencies.len(),
        });
    }
    let scores: Vec<f64> = variances
        .iter()
        .zip(latencies)
        .map(|(&v, &l)| -kappas.0 * v - kappas.1 * l)
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w = DVector::from_iterator(scores.len(), scores.iter().map(|s| (s - m).exp()));
    let sum = w.sum();
    w /= sum;
    Ok(w)
}

/// Ridge fit of the lifted one-step transition:
/// `K = (sum Xi' Xi^T)(sum Xi Xi^T + lambda I)^{-1}`.
///
/// With data generated by an exact linear map and at least `dim` independent
/// samples, the fit recovers the map as the ridge vanishes. A zero ridge on
/// rank-deficient data is a `SingularSystem` error.
pub fn koopman_fit(
    feature_pairs: &[(DVector<f64>, DVector<f64>)],
    ridge_lambda: f64,
) -> Result<DMatrix<f64>> {
    let Some((first, _)) = feature_pairs.first() else {
        return Err(Error::EmptyCandidates {
            context: "feature pairs",
        });
    };
    let dim = first.len();
    let mut gram = DMatrix::zeros(dim, dim);
    let mut cross = DMatrix::zeros(dim, dim);
    for (i, (xi, xi_next)) in feature_pairs.iter().enumerate() {
        if xi.len() != dim || xi_next.len() != dim {
            return Err(Error::DimMismatch {
                context: "lifted features",
                detail: format!("pair {i} has dims {}->{} vs {dim}", xi.len(), xi_next.len()),
            });
        }
        gram += xi * xi.transpose();
        cross += xi_next * xi.transpose();
    }
    gram += DMatrix::identity(dim, dim) * ridge_lambda;
    let inv = gram.try_inverse().ok_or(Error::SingularSystem {
        context: "lifted covariance",
    })?;
    Ok(cross * inv)
}

/// Soft-thresholded model step with a second-moment accumulator:
/// `theta' = soft_threshold(theta - eta*grad, eta*l1_beta)`,
/// `m' = rho*m + (1-rho)*grad.^2`.
pub fn model_update(
    theta: &DVector<f64>,
    m: &DVector<f64>,
    gradient: &DVector<f64>,
    eta: f64,
    l1_beta: f64,
    moment_rho: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if theta.len() != gradient.len() || theta.len() != m.len() {
        return Err(Error::LengthMismatch {
            context: "model update",
            expected: theta.len(),
            got: gradient.len().max(m.len()),
        });
    }
    if !(eta > 0.0) || !(0.0..1.0).contains(&moment_rho) || l1_beta < 0.0 {
        return Err(Error::config(vec![format!(
            "model update needs eta > 0 (got {eta}), rho in [0,1) (got {moment_rho}), beta >= 0 (got {l1_beta})"
        )]));
    }
    let t = eta * l1_beta;
    let theta_next = DVector::from_fn(theta.len(), |i, _| {
        soft_threshold(theta[i] - eta * gradient[i], t)
    });
    let m_next = DVector::from_fn(m.len(), |i, _| {
        moment_rho * m[i] + (1.0 - moment_rho) * gradient[i] * gradient[i]
    });
    Ok((theta_next, m_next))
}

/// `sign(x) * max(|x| - t, 0)` — the closed-form prox of `t|x|`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// One primal–dual step on box-constrained `X` with inequality multipliers:
/// `X' = clip(X - eta_x (cost_grad + g_jac^T lambda))`,
/// `lambda' = max(0, lambda + eta_lambda * g)`.
///
/// `g` and `g_jac` are the constraint values and Jacobian evaluated at the
/// incoming `X`; multipliers never go negative.
pub fn primal_dual_step(
    x: &DVector<f64>,
    cost_grad: &DVector<f64>,
    g_values: &DVector<f64>,
    g_jac: &DMatrix<f64>,
    multipliers: &DVector<f64>,
    eta_x: f64,
    eta_lambda: f64,
    box_bounds: (f64, f64),
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = x.len();
    let c = g_values.len();
    if cost_grad.len() != n || g_jac.nrows() != c || g_jac.ncols() != n || multipliers.len() != c {
        return Err(Error::DimMismatch {
            context: "primal-dual step",
            detail: format!(
                "x {n}, grad {}, g {c}, jac {}x{}, lambda {}",
                cost_grad.len(),
                g_jac.nrows(),
                g_jac.ncols(),
                multipliers.len()
            ),
        });
    }
    if !(eta_x > 0.0) || !(eta_lambda > 0.0) {
        return Err(Error::config(vec![format!(
            "primal-dual steps must be positive, got ({eta_x}, {eta_lambda})"
        )]));
    }
    let direction = cost_grad + g_jac.transpose() * multipliers;
    let mut x_next = x - direction * eta_x;
    for v in x_next.iter_mut() {
        *v = v.clamp(box_bounds.0, box_bounds.1);
    }
    let mut lambda_next = multipliers + g_values * eta_lambda;
    for l in lambda_next.iter_mut() {
        *l = l.max(0.0);
    }
    Ok((x_next, lambda_next))
}

/// Multiplicative-weights population step `P' ∝ exp(-eta_p h) .* P`,
/// max-shifted and renormalized.
pub fn population_update(
    p: &PlanDistribution,
    costs: &DVector<f64>,
    eta_p: f64,
) -> Result<PlanDistribution> {
    if costs.len() != p.len() {
        return Err(Error::LengthMismatch {
            context: "population update",
            expected: p.len(),
            got: costs.len(),
        });
    }
    if !(eta_p > 0.0) {
        return Err(Error::config(vec![format!(
            "population step must be positive, got {eta_p}"
        )]));
    }
    let h_min = costs.min();
    let mut mass: Vec<f64> = p
        .as_slice()
        .iter()
        .zip(costs.iter())
        .map(|(&pi, &h)| pi * (-eta_p * (h - h_min)).exp())
        .collect();
    let sum: f64 = mass.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::NonFinite {
            context: "population update",
        });
    }
    for v in mass.iter_mut() {
        *v /= sum;
    }
    PlanDistribution::from_probabilities(&mass)
}

/// Sub-Gaussian chance test: true iff
/// `mean(g) + sqrt(2 var(g) ln(1/delta)) <= 0` (population variance).
pub fn chance_constraint_ok(samples_of_g: &[f64], delta: f64) -> Result<bool> {
    if samples_of_g.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: samples_of_g.len(),
        });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config(vec![format!(
            "risk level must lie in (0,1), got {delta}"
        )]));
    }
    let n = samples_of_g.len() as f64;
    let mean = samples_of_g.iter().sum::<f64>() / n;
    let var = samples_of_g.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
    Ok(mean + (2.0 * var * (1.0 / delta).ln()).sqrt() <= 0.0)
}

/// Mean-drift test: true iff `mean(V_next) - V_prev <= -kappa*x_norm_sq + c`.
pub fn cloud_lyapunov_ok(
    v_samples_next: &[f64],
    v_prev: f64,
    x_norm_sq: f64,
    kappa: f64,
    slack_c: f64,
) -> bool {
    debug_assert!(kappa > 0.0 && slack_c >= 0.0);
    if v_samples_next.is_empty() {
        return true;
    }
    let mean = v_samples_next.iter().sum::<f64>() / v_samples_next.len() as f64;
    mean - v_prev <= -kappa * x_norm_sq + slack_c
}

/// Cloud coordinator state carried across coordinate calls.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudState {
    /// Latest confidence-weighted fusion.
    pub z: DVector<f64>,
    /// Latest lifted features (fusion plus constant).
    pub xi: DVector<f64>,
    /// Global state estimate driven by the primal–dual iteration.
    pub x: DVector<f64>,
    /// Lifted transition operator.
    pub k_op: DMatrix<f64>,
    /// Forecast head weights.
    pub theta: DVector<f64>,
    /// Second-moment accumulator for the head gradients.
    pub m: DVector<f64>,
    /// Mixture over candidate plans.
    pub population: PlanDistribution,
    pub temperature: TemperatureState,
    /// Inequality multipliers; always nonnegative.
    pub multipliers: DVector<f64>,
    /// Current risk level; only shrinks within a coordinate call.
    pub risk_delta: f64,
    /// Objective weights; repair renormalizes them toward violated goals.
    pub weights: DVector<f64>,
    /// Sliding window of lifted transition pairs for the refit.
    pub koopman_pairs: VecDeque<(DVector<f64>, DVector<f64>)>,
    pub cost_history: CostHistory,
    /// Previous tick's accepted mean drift value.
    pub lyapunov_prev: Option<f64>,
}

impl CloudState {
    /// Fresh state for fused vectors of dimension `z_dim` and `k_plans`
    /// candidate plans. Lifted dimension is `z_dim + 1` (affine lift).
    pub fn new(z_dim: usize, k_plans: usize) -> Result<Self> {
        let lifted = z_dim + 1;
        Ok(CloudState {
            z: DVector::zeros(z_dim),
            xi: DVector::zeros(lifted),
            x: DVector::zeros(z_dim),
            k_op: DMatrix::identity(lifted, lifted),
            theta: DVector::zeros(lifted),
            m: DVector::zeros(lifted),
            population: PlanDistribution::from_probabilities(&vec![
                1.0 / k_plans as f64;
                k_plans
            ])?,
            temperature: TemperatureState::new(1.0, 0.9)?,
            multipliers: DVector::zeros(0),
            risk_delta: 1e-3,
            weights: DVector::from_row_slice(&[0.4, 0.3, 0.2, 0.1]),
            koopman_pairs: VecDeque::new(),
            cost_history: CostHistory::new(16),
            lyapunov_prev: None,
        })
    }
}

/// Tunables for the coordinate loop.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudConfig {
    /// Confidence coefficients (variance, latency).
    pub kappas: (f64, f64),
    pub koopman_ridge: f64,
    pub koopman_window: usize,
    /// Forecast head step, l1 weight, and moment decay.
    pub eta_theta: f64,
    pub l1_beta: f64,
    pub moment_rho: f64,
    /// Primal–dual steps and box.
    pub eta_x: f64,
    pub eta_lambda: f64,
    pub box_bounds: (f64, f64),
    /// Population step.
    pub eta_p: f64,
    /// Dispatch regularization.
    pub epsilon: f64,
    pub sinkhorn_tol: f64,
    pub sinkhorn_iters: usize,
    /// Coupling solver for the dispatch step.
    pub dispatch: DispatchMethod,
    /// Drift margins.
    pub lyapunov_kappa: f64,
    pub lyapunov_slack: f64,
    /// Repair policy: which objective indexes are blamed by each gate, the
    /// per-round boost, and the round cap.
    pub risk_objective: usize,
    pub stability_objective: usize,
    pub repair_boost: f64,
    pub max_repair_rounds: usize,
    /// Forecast horizon count; horizon h is weighted 1/h.
    pub horizons: usize,
}

impl Default for CloudConfig {
    fn default() -> Self {
        CloudConfig {
            kappas: (1.0, 1.0),
            koopman_ridge: 1e-6,
            koopman_window: 32,
            eta_theta: 1e-2,
            l1_beta: 1e-3,
            moment_rho: 0.9,
            eta_x: 1e-2,
            eta_lambda: 1e-2,
            box_bounds: (-1e3, 1e3),
            eta_p: 0.5,
            epsilon: 1e-2,
            sinkhorn_tol: 1e-6,
            sinkhorn_iters: 10_000,
            dispatch: DispatchMethod::default(),
            lyapunov_kappa: 1e-3,
            lyapunov_slack: 1.0,
            risk_objective: 3,
            stability_objective: 1,
            repair_boost: 0.1,
            max_repair_rounds: 5,
            horizons: 3,
        }
    }
}

/// Everything the coordinator consumes in one call.
pub struct CoordinationContext<'a> {
    /// Per-fog `(A_f, s_f)` summaries.
    pub summaries: &'a [(DMatrix<f64>, DVector<f64>)],
    /// Per-fog report variance and staleness/latency for the confidence step.
    pub variances: &'a [f64],
    pub latencies: &'a [f64],
    /// Scalar forecast targets for horizons 1..=H.
    pub forecast_targets: &'a [f64],
    /// Per-objective per-plan costs (rows: objectives, columns: plans).
    pub plan_costs: &'a DMatrix<f64>,
    /// Constraint values/Jacobian and objective gradient at the current X.
    pub cost_grad: &'a DVector<f64>,
    pub constraint_values: &'a DVector<f64>,
    pub constraint_jac: &'a DMatrix<f64>,
    /// Per-plan risk samples (rows: plans) for the chance gate.
    pub risk_samples_per_plan: &'a DMatrix<f64>,
    /// Per-plan next-tick drift samples (rows: plans) for the Lyapunov gate.
    pub v_next_samples_per_plan: &'a DMatrix<f64>,
    /// Dispatch problem: fog capacity shares and per-plan regional demand.
    pub dispatch_cost: &'a DMatrix<f64>,
    pub fog_capacity: &'a DVector<f64>,
    pub region_demand_per_plan: &'a DMatrix<f64>,
    pub seed: u64,
}

/// What one coordinate call produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinationOutcome {
    /// Committed plan (argmax of the final population).
    pub plan_index: usize,
    /// Seeded provisional sample from the soft policy (advisory).
    pub provisional_plan: usize,
    pub transport: TransportPlan,
    pub state: CloudState,
    /// 1 when the first pass dispatched; each repair adds one.
    pub rounds: usize,
    /// True when the gates still failed after the repair budget.
    pub flagged: bool,
    pub chance_ok: bool,
    pub lyapunov_ok: bool,
}

/// Full coordination pass: fuse, lift, forecast refit and head update,
/// primal–dual state step, population and temperature updates, entropic
/// dispatch, then the chance and drift gates. On a gate failure the repair
/// loop boosts the blamed objective weight by the configured factor,
/// halves the risk level, damps the population step, loosens the dispatch
/// regularization, and redoes the population and dispatch steps — at most
/// `max_repair_rounds` times, after which the dispatch goes out best-effort
/// with `flagged` set.
pub fn coordinate(
    state: &CloudState,
    ctx: &CoordinationContext<'_>,
    cfg: &CloudConfig,
) -> Result<CoordinationOutcome> {
    let mut s = state.clone();
    let k_plans = s.population.len();
    if ctx.plan_costs.ncols() != k_plans
        || ctx.risk_samples_per_plan.nrows() != k_plans
        || ctx.v_next_samples_per_plan.nrows() != k_plans
        || ctx.region_demand_per_plan.nrows() != k_plans
        || ctx.plan_costs.nrows() != s.weights.len()
    {
        return Err(Error::DimMismatch {
            context: "coordination context",
            detail: format!(
                "plans {k_plans}, objective rows {} (weights {}), risk rows {}, drift rows {}, demand rows {}",
                ctx.plan_costs.nrows(),
                s.weights.len(),
                ctx.risk_samples_per_plan.nrows(),
                ctx.v_next_samples_per_plan.nrows(),
                ctx.region_demand_per_plan.nrows()
            ),
        });
    }

    // Fuse with confidence weights, then lift.
    let w = confidence_weights(ctx.variances, ctx.latencies, cfg.kappas)?;
    if w.len() != ctx.summaries.len() {
        return Err(Error::LengthMismatch {
            context: "confidence weights",
            expected: ctx.summaries.len(),
            got: w.len(),
        });
    }
    let weighted: Vec<(DMatrix<f64>, DVector<f64>)> = ctx
        .summaries
        .iter()
        .zip(w.iter())
        .map(|((a, sv), &wf)| (a * wf, sv.clone()))
        .collect();
    let z = fuse(&weighted)?;
    if z.len() != s.z.len() {
        return Err(Error::DimMismatch {
            context: "cloud fusion",
            detail: format!("fused dim {} vs state dim {}", z.len(), s.z.len()),
        });
    }
    let mut xi = DVector::zeros(z.len() + 1);
    xi.rows_mut(0, z.len()).copy_from(&z);
    xi[z.len()] = 1.0;

    // Windowed transition refit.
    if s.xi.norm() > 0.0 {
        s.koopman_pairs.push_back((s.xi.clone(), xi.clone()));
        while s.koopman_pairs.len() > cfg.koopman_window {
            s.koopman_pairs.pop_front();
        }
    }
    if !s.koopman_pairs.is_empty() {
        let pairs: Vec<(DVector<f64>, DVector<f64>)> = s.koopman_pairs.iter().cloned().collect();
        s.k_op = koopman_fit(&pairs, cfg.koopman_ridge)?;
    }
    s.z = z;
    s.xi = xi;

    // Horizon-weighted forecast loss gradient on the linear head:
    // prediction_h = theta . (K^h xi), loss = sum_h (1/h)/2 (pred - target)^2.
    if !ctx.forecast_targets.is_empty() {
        let horizons = ctx.forecast_targets.len().min(cfg.horizons.max(1));
        let mut grad = DVector::zeros(s.theta.len());
        let mut propagated = s.xi.clone();
        for (h, &target) in ctx.forecast_targets.iter().take(horizons).enumerate() {
            propagated = &s.k_op * propagated;
            let pred = s.theta.dot(&propagated);
            grad += &propagated * ((pred - target) / (h as f64 + 1.0));
        }
        let (theta, m) = model_update(
            &s.theta,
            &s.m,
            &grad,
            cfg.eta_theta,
            cfg.l1_beta,
            cfg.moment_rho,
        )?;
        s.theta = theta;
        s.m = m;
    }

    // Primal–dual step on the global state.
    if s.multipliers.len() != ctx.constraint_values.len() {
        s.multipliers = DVector::zeros(ctx.constraint_values.len());
    }
    let (x_next, lambda_next) = primal_dual_step(
        &s.x,
        ctx.cost_grad,
        ctx.constraint_values,
        ctx.constraint_jac,
        &s.multipliers,
        cfg.eta_x,
        cfg.eta_lambda,
        cfg.box_bounds,
    )?;
    s.x = x_next;
    s.multipliers = lambda_next;

    // Population, temperature, soft plan, dispatch, gates — with repair.
    let mut eta_p = cfg.eta_p;
    let mut epsilon = cfg.epsilon;
    let mut rounds = 0usize;
    let mut repairs = 0usize;
    loop {
        rounds += 1;
        let h = blended_plan_costs(ctx.plan_costs, &s.weights);
        let population = population_update(&s.population, &h, eta_p)?;
        let expected_cost = population
            .as_slice()
            .iter()
            .zip(h.iter())
            .map(|(&p, &c)| p * c)
            .sum::<f64>();
        let mut history = s.cost_history.clone();
        history.push(expected_cost);
        let temperature =
            update_temperature(s.temperature, &history, TemperatureVariant::Cloud);
        let policy = soft_policy(&h, temperature.value)?;
        let provisional = sample_plan(&policy, crate::rng::mix(ctx.seed));
        let committed = population.argmax();

        // Entropic dispatch for the committed plan's regional demand.
        let mu = normalize_marginal(ctx.fog_capacity)?;
        let nu = normalize_marginal(&ctx.region_demand_per_plan.row(committed).transpose())?;
        let problem = TransportProblem::new(ctx.dispatch_cost.clone(), mu, nu, epsilon)?;
        let transport = match cfg.dispatch {
            DispatchMethod::Entropic => sinkhorn(&problem, cfg.sinkhorn_tol, cfg.sinkhorn_iters)?,
            DispatchMethod::Greedy => assign_greedy(&problem),
        };

        // Gates on the committed plan.
        let risk_row: Vec<f64> = ctx.risk_samples_per_plan.row(committed).iter().copied().collect();
        let chance_ok = chance_constraint_ok(&risk_row, s.risk_delta)?;
        let v_row: Vec<f64> = ctx
            .v_next_samples_per_plan
            .row(committed)
            .iter()
            .copied()
            .collect();
        let v_mean = v_row.iter().sum::<f64>() / v_row.len().max(1) as f64;
        let lyapunov_ok = match s.lyapunov_prev {
            Some(prev) => cloud_lyapunov_ok(
                &v_row,
                prev,
                s.x.norm_squared(),
                cfg.lyapunov_kappa,
                cfg.lyapunov_slack,
            ),
            None => true,
        };

        let ok = chance_ok && lyapunov_ok;
        if ok || repairs == cfg.max_repair_rounds {
            // Either the gates passed or the repair budget is spent: the
            // latter dispatches best-effort with the record flagged.
            s.population = population;
            s.temperature = temperature;
            s.cost_history = history;
            s.lyapunov_prev = Some(v_mean);
            return Ok(CoordinationOutcome {
                plan_index: committed,
                provisional_plan: provisional,
                transport,
                state: s,
                rounds,
                flagged: !ok,
                chance_ok,
                lyapunov_ok,
            });
        }
        repairs += 1;

        // Adaptive repair: boost the blamed objective, tighten the risk
        // level, damp the population step, loosen the regularization.
        let blamed = if !chance_ok {
            cfg.risk_objective
        } else {
            cfg.stability_objective
        };
        if blamed < s.weights.len() {
            s.weights[blamed] *= 1.0 + cfg.repair_boost;
            let sum = s.weights.sum();
            s.weights /= sum;
        }
        s.risk_delta *= 0.5;
        eta_p *= 0.9;
        epsilon *= 1.1;
        // The next round's population step starts from the repaired weights
        // but the same incoming population, matching "redo" semantics.
    }
}

/// Weighted blend of per-objective plan costs into one cost per plan.
fn blended_plan_costs(plan_costs: &DMatrix<f64>, weights: &DVector<f64>) -> DVector<f64> {
    let k = plan_costs.ncols();
    DVector::from_fn(k, |j, _| {
        (0..plan_costs.nrows())
            .map(|q| weights[q] * plan_costs[(q, j)])
            .sum()
    })
}

fn normalize_marginal(raw: &DVector<f64>) -> Result<DVector<f64>> {
    let sum = raw.sum();
    if !(sum > 0.0) || raw.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidMarginals(format!(
            "marginal must be nonnegative with positive mass, got sum {sum}"
        )));
    }
    Ok(raw / sum)
}
