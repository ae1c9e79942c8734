//! Full optimization loop over joint routing-traffic plans.
//!
//! Each iteration runs, in order: joint encoding and marginal extraction,
//! cost assembly with quadratic constraint penalties, energy and gradient
//! evaluation, a tangent step on the unit sphere, renormalization,
//! temperature adaptation with annealed soft sampling, a coupling-reduction
//! step on both factors, Tchebycheff weight refresh, feasibility projection,
//! and a descent-certificate check. Certificate violations halve the step
//! size and double the penalty strength; the loop stops when the energy
//! change and the cross-layer coupling both fall below their tolerances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::anneal::{
    sample_plan, soft_policy, update_temperature, CostHistory, TemperatureState,
    TemperatureVariant, DEFAULT_WINDOW,
};
use crate::energy::{
    assemble, descent_certificate, descent_direction, energy, energy_gradient, minmax_normalize,
    penalized_operator, project_feasible, tchebycheff, CostBundle, FeasibleSet,
};
use crate::qstate::{
    joint_encode, mutual_information, mi_gradients, normalize, probabilities, Amplitudes,
    JointAmplitude, PlanDistribution,
};
use crate::{rng, Error, Result};

/// Hard floor for the step size under repeated backoff.
pub const ETA_FLOOR: f64 = 1e-8;
/// Penalty strength cap under repeated escalation.
pub const RHO_CAP: f64 = 1e6;
/// Starting temperature for the annealed sampler.
pub const INITIAL_TEMPERATURE: f64 = 1.0;
/// Scale factor between the energy step size and the coupling-reduction step.
pub const COUPLING_STEP_FRACTION: f64 = 0.1;

/// Configuration for one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QioConfig {
    /// Communication-plan count (rows of the joint state).
    pub k: usize,
    /// Mobility-plan count (columns of the joint state).
    pub l: usize,
    /// Initial step size.
    pub eta: f64,
    /// Temperature smoothing factor in (0, 1].
    pub beta: f64,
    /// Initial penalty strength.
    pub rho: f64,
    /// Stop when the accepted energy changes by at most this much...
    pub tol_energy: f64,
    /// ...and the cross-layer coupling is at most this much.
    pub tol_coupling: f64,
    /// Iteration budget.
    pub max_iters: usize,
    /// Floor for the smoothness bound used by the descent certificate; the
    /// certificate uses the larger of this and the exact per-iteration bound
    /// (twice the largest diagonal of the penalized operator).
    pub l_smooth: f64,
    /// Minimum Tchebycheff weight per objective.
    pub alpha_min: f64,
    /// Seed for the per-iteration plan sampler.
    pub seed: u64,
    /// When false, the hard feasibility projection is skipped and caps are
    /// enforced only through the penalty term (used for ablation studies).
    pub enforce_projection: bool,
    /// When false, the temperature stays at its initial value instead of
    /// annealing with the cost history (used for ablation studies).
    pub anneal_temperature: bool,
}

impl Default for QioConfig {
    fn default() -> Self {
        QioConfig {
            k: 128,
            l: 8,
            eta: 1e-2,
            beta: 0.9,
            rho: 1.0,
            tol_energy: 1e-8,
            tol_coupling: 1e-6,
            max_iters: 5000,
            l_smooth: 2.0,
            alpha_min: 1e-3,
            seed: 0,
            enforce_projection: true,
            anneal_temperature: true,
        }
    }
}

impl QioConfig {
    /// Validates every field, collecting all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.k == 0 {
            issues.push("k must be at least 1".to_string());
        }
        if self.l == 0 {
            issues.push("l must be at least 1".to_string());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            issues.push(format!("eta must be positive and finite, got {}", self.eta));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            issues.push(format!("beta must be in (0, 1], got {}", self.beta));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            issues.push(format!("rho must be positive and finite, got {}", self.rho));
        }
        if !(self.tol_energy > 0.0) {
            issues.push(format!("tol_energy must be positive, got {}", self.tol_energy));
        }
        if !(self.tol_coupling > 0.0) {
            issues.push(format!(
                "tol_coupling must be positive, got {}",
                self.tol_coupling
            ));
        }
        if self.max_iters == 0 {
            issues.push("max_iters must be at least 1".to_string());
        }
        if !(self.l_smooth > 0.0 && self.l_smooth.is_finite()) {
            issues.push(format!(
                "l_smooth must be positive and finite, got {}",
                self.l_smooth
            ));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min < 1.0) {
            issues.push(format!(
                "alpha_min must be in (0, 1), got {}",
                self.alpha_min
            ));
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::config(issues))
        }
    }
}

/// One recorded iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QioIteration {
    /// Accepted energy after this iteration (unchanged if the step was
    /// rejected).
    pub energy: f64,
    /// Sampler temperature.
    pub temperature: f64,
    /// Cross-layer coupling (mutual information, nats).
    pub coupling: f64,
    /// Tangent-direction norm at the start of the iteration.
    pub grad_norm: f64,
    /// Step size used for the attempted step.
    pub eta: f64,
    /// Penalty strength used for the attempted step.
    pub rho: f64,
    /// Provisionally sampled plan index.
    pub plan: usize,
    /// L2 norm of the accepted state (sphere-invariant witness).
    pub psi_norm: f64,
    /// Whether the descent certificate accepted the step.
    pub accepted: bool,
}

/// Per-run record of every iteration plus termination facts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QioTrace {
    pub iterations: Vec<QioIteration>,
    /// True when both stopping tolerances were met before the budget ran out.
    pub converged: bool,
    /// Total certificate violations over the run.
    pub backoffs: usize,
}

/// Result of an optimization run.
#[derive(Debug, Clone)]
pub struct QioOutcome {
    /// Final communication-plan state.
    pub psi: Amplitudes,
    /// Squared-amplitude distribution of the final state.
    pub distribution: PlanDistribution,
    /// Committed plan: argmax of the final distribution (ties to the lowest
    /// index). The per-iteration sampled plans in the trace are advisory.
    pub plan: usize,
    pub trace: QioTrace,
}

/// Step size after a number of certificate violations: `eta / 2^violations`,
/// floored at `ETA_FLOOR`.
pub fn step_size_backoff(eta: f64, violations: u32) -> f64 {
    debug_assert!(eta > 0.0);
    (eta * 0.5f64.powi(violations.min(1074) as i32)).max(ETA_FLOOR)
}

/// Runs the full loop with an exactly separable joint state.
///
/// `features` seeds the state: an empty vector selects the uniform
/// superposition; otherwise it must have length `cfg.k` and is treated as the
/// caller's activation output, which is scaled onto the sphere (build it with
/// `qstate::init_superposition` for the full featurized form).
///
/// The provider is called once per iteration and returns per-objective plan
/// costs, blending weights, and constraint residuals. Its `weights` are used
/// as given on the first iteration and replaced by the Tchebycheff refresh
/// afterwards (when there are 2-4 objectives); its `rho` is superseded by the
/// loop's escalating penalty strength.
pub fn optimize<F>(
    features: &DVector<f64>,
    costs: F,
    fs: &FeasibleSet,
    cfg: &QioConfig,
) -> Result<QioOutcome>
where
    F: FnMut(usize) -> Result<CostBundle>,
{
    optimize_coupled(features, costs, fs, None, cfg)
}

/// Runs the full loop with an optional fixed cross-coupling residual added to
/// the separable joint encoding. A nonzero residual makes the mutual
/// information between the two plan layers positive, which activates the
/// coupling-reduction steps and the coupling half of the stopping test.
pub fn optimize_coupled<F>(
    features: &DVector<f64>,
    mut costs: F,
    fs: &FeasibleSet,
    cross_residual: Option<&DMatrix<f64>>,
    cfg: &QioConfig,
) -> Result<QioOutcome>
where
    F: FnMut(usize) -> Result<CostBundle>,
{
    cfg.validate()?;
    if fs.len() != cfg.k {
        return Err(Error::LengthMismatch {
            context: "feasible set",
            expected: cfg.k,
            got: fs.len(),
        });
    }
    if let Some(r) = cross_residual {
        if r.nrows() != cfg.k || r.ncols() != cfg.l {
            return Err(Error::DimMismatch {
                context: "cross-coupling residual",
                detail: format!(
                    "expected {}x{}, got {}x{}",
                    cfg.k,
                    cfg.l,
                    r.nrows(),
                    r.ncols()
                ),
            });
        }
    }

    let seeded = if features.is_empty() {
        Amplitudes::uniform(cfg.k)?
    } else {
        if features.len() != cfg.k {
            return Err(Error::LengthMismatch {
                context: "feature vector",
                expected: cfg.k,
                got: features.len(),
            });
        }
        normalize(features)?
    };
    // Feasibility is enforced from the start: a coordinate zeroed here stays
    // zero under the tangent flow (its gradient component vanishes with it),
    // so forbidden plans never re-enter and the certificate always compares
    // feasible states.
    let mut psi = if cfg.enforce_projection {
        project_feasible(&seeded, fs)?
    } else {
        seeded
    };
    let mut psi_m = Amplitudes::uniform(cfg.l)?;

    let mut eta = cfg.eta;
    let mut rho = cfg.rho;
    let mut violations: u32 = 0;
    let mut temp = TemperatureState::new(INITIAL_TEMPERATURE, cfg.beta)?;
    let mut history = CostHistory::new(DEFAULT_WINDOW);
    let mut tcheby_weights: Option<DVector<f64>> = None;
    let mut prev_energy: Option<f64> = None;

    let mut trace = QioTrace::default();
    trace.iterations.reserve(cfg.max_iters.min(65_536));

    for t in 0..cfg.max_iters {
        let psi_start = psi.clone();
        let psi_m_start = psi_m.clone();

        let bundle = costs(t)?;
        let q = bundle.costs.len();
        if bundle.k() != cfg.k {
            return Err(Error::LengthMismatch {
                context: "cost provider",
                expected: cfg.k,
                got: bundle.k(),
            });
        }

        let weights = match &tcheby_weights {
            Some(w) if w.len() == q => w.clone(),
            _ => bundle.weights.clone(),
        };
        let h = assemble(&bundle.costs, &weights)?;
        let residuals = augment_residuals(&bundle.residuals, fs, &psi)?;
        let op = penalized_operator(&h, &residuals, rho)?;

        let e_before = energy(&psi, &op);
        if !e_before.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                detail: format!("non-finite energy {e_before}"),
            });
        }
        let grad = energy_gradient(&psi, &op);
        let dir = descent_direction(&psi, &grad);
        let dir_norm = dir.norm();

        let stepped = psi.as_vector() + &dir * eta;
        let mut psi_next = normalize(&stepped)?;

        history.push(e_before);
        if cfg.anneal_temperature {
            temp = update_temperature(temp, &history, TemperatureVariant::Cloud);
        }
        let pi = soft_policy(&h, temp.value)?;
        let sampled = sample_plan(&pi, rng::mix(cfg.seed ^ rng::mix(t as u64 + 1)));

        let joint = build_joint(&psi_next, &psi_m, cross_residual)?;
        let coupling = mutual_information(&joint)?;
        if coupling > cfg.tol_coupling {
            let (gc, gm) = mi_gradients(&joint)?;
            let step = eta * COUPLING_STEP_FRACTION;
            // The gradients are taken with respect to the nonnegative
            // canonical factors; chain through |psi| for signed amplitudes.
            let adj_c = DVector::from_fn(cfg.k, |i, _| {
                psi_next.as_slice()[i] - step * gc[i] * sign_of(psi_next.as_slice()[i])
            });
            let adj_m = DVector::from_fn(cfg.l, |j, _| {
                psi_m.as_slice()[j] - step * gm[j] * sign_of(psi_m.as_slice()[j])
            });
            psi_next = normalize(&adj_c)?;
            psi_m = normalize(&adj_m)?;
        }

        if (2..=4).contains(&q) {
            let chat: Vec<DVector<f64>> = bundle.costs.iter().map(minmax_normalize).collect();
            let probs = probabilities(&psi_next);
            let current: Vec<f64> = (0..q)
                .map(|qi| {
                    chat[qi]
                        .iter()
                        .zip(probs.as_slice())
                        .map(|(c, p)| c * p)
                        .sum()
                })
                .collect();
            let ideal = vec![0.0; q];
            let (w_next, _) = tchebycheff(&current, &ideal, cfg.alpha_min)?;
            tcheby_weights = Some(w_next);
        }

        if cfg.enforce_projection {
            psi_next = project_feasible(&psi_next, fs)?;
        }

        let e_after = energy(&psi_next, &op);
        if !e_after.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                detail: format!("non-finite energy {e_after}"),
            });
        }
        let lipschitz = cfg.l_smooth.max(2.0 * op.max_diag());
        let accepted = descent_certificate(e_before, e_after, eta, dir_norm, lipschitz);

        let (energy_now, eta_used, rho_used) = if accepted {
            psi = psi_next;
            (e_after, eta, rho)
        } else {
            psi_m = psi_m_start;
            psi = psi_start;
            let eta_used = eta;
            let rho_used = rho;
            violations += 1;
            eta = step_size_backoff(cfg.eta, violations);
            rho = (rho * 2.0).min(RHO_CAP);
            (e_before, eta_used, rho_used)
        };

        trace.iterations.push(QioIteration {
            energy: energy_now,
            temperature: temp.value,
            coupling,
            grad_norm: dir_norm,
            eta: eta_used,
            rho: rho_used,
            plan: sampled,
            psi_norm: psi.as_vector().norm(),
            accepted,
        });

        if accepted {
            if let Some(prev) = prev_energy {
                if (energy_now - prev).abs() <= cfg.tol_energy && coupling <= cfg.tol_coupling {
                    trace.converged = true;
                    trace.backoffs = violations as usize;
                    let distribution = probabilities(&psi);
                    let plan = distribution.argmax();
                    return Ok(QioOutcome {
                        psi,
                        distribution,
                        plan,
                        trace,
                    });
                }
            }
            prev_energy = Some(energy_now);
        }
    }

    trace.backoffs = violations as usize;
    let distribution = probabilities(&psi);
    let plan = distribution.argmax();
    Ok(QioOutcome {
        psi,
        distribution,
        plan,
        trace,
    })
}

/// Adds feasibility violations to the provider's constraint residuals:
/// the positive part of the provider residual plus the cap excess
/// `max(0, p_k - cap_k)` for bounded plans, so penalty escalation pushes the
/// flow toward the feasible set instead of fighting the projection.
fn augment_residuals(
    provided: &DVector<f64>,
    fs: &FeasibleSet,
    psi: &Amplitudes,
) -> Result<DVector<f64>> {
    if provided.len() != psi.len() {
        return Err(Error::LengthMismatch {
            context: "constraint residuals",
            expected: psi.len(),
            got: provided.len(),
        });
    }
    Ok(DVector::from_fn(psi.len(), |i, _| {
        let p = psi.as_slice()[i] * psi.as_slice()[i];
        let cap_excess = if fs.caps()[i] < 1.0 {
            (p - fs.caps()[i]).max(0.0)
        } else {
            0.0
        };
        provided[i].max(0.0) + cap_excess
    }))
}

fn build_joint(
    psi_c: &Amplitudes,
    psi_m: &Amplitudes,
    residual: Option<&DMatrix<f64>>,
) -> Result<JointAmplitude> {
    match residual {
        None => Ok(joint_encode(psi_c, psi_m)),
        Some(r) => {
            let m = psi_c.as_vector() * psi_m.as_vector().transpose() + r;
            JointAmplitude::from_matrix(m)
        }
    }
}

/// Sign with the convention sign(0) = 0, so zero-amplitude plans receive no
/// coupling adjustment.
fn sign_of(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
