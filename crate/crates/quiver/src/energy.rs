//! Multi-objective energy machinery over plan amplitudes.
//!
//! Per-objective cost vectors are min-max normalized, blended by simplex
//! weights into a scalar cost per plan, and lifted to a diagonal operator with
//! a quadratic penalty on constraint residuals. The energy of a state is the
//! quadratic form psi^T H psi; descent happens along the sphere-tangent
//! projection of the negative gradient, certified by a sufficient-decrease
//! inequality. Weight refresh solves a capped Tchebycheff min-max, and
//! feasibility is restored by an alternating zero/clip/renormalize projection
//! in probability space.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::qstate::{self, Amplitudes};

/// Diagonal cost-plus-penalty operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagOperator(DVector<f64>);

impl DiagOperator {
    pub fn diag(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }

    /// Largest diagonal entry; 2x this is the exact gradient Lipschitz
    /// constant of the quadratic energy.
    pub fn max_diag(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-objective costs plus blending weights and constraint residuals.
#[derive(Debug, Clone)]
pub struct CostBundle {
    /// One cost vector per objective, all of the same plan dimension.
    pub costs: Vec<DVector<f64>>,
    /// Simplex weights over objectives.
    pub weights: DVector<f64>,
    /// Constraint residuals G per plan (positive = violated).
    pub residuals: DVector<f64>,
    /// Penalty strength.
    pub rho: f64,
}

impl CostBundle {
    /// Number of plans.
    pub fn k(&self) -> usize {
        self.costs.first().map_or(0, DVector::len)
    }
}

/// Plan-probability feasibility data: per-plan probability caps and an
/// outright forbidden set. Caps over allowed plans must sum to at least 1 so
/// a feasible distribution exists.
#[derive(Debug, Clone)]
pub struct FeasibleSet {
    caps: Vec<f64>,
    forbidden: Vec<bool>,
}

impl FeasibleSet {
    pub fn new(caps: Vec<f64>, forbidden: Vec<bool>) -> Result<Self> {
        if caps.len() != forbidden.len() {
            return Err(Error::LengthMismatch {
                context: "feasible set",
                expected: caps.len(),
                got: forbidden.len(),
            });
        }
        if caps.iter().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0) {
            return Err(Error::InvalidWeights(
                "probability caps must lie in [0, 1]".into(),
            ));
        }
        let cap_sum: f64 = caps
            .iter()
            .zip(&forbidden)
            .filter(|(_, &f)| !f)
            .map(|(c, _)| *c)
            .sum();
        if cap_sum < 1.0 - 1e-12 {
            return Err(Error::InfeasibleSimplex { cap_sum });
        }
        Ok(FeasibleSet { caps, forbidden })
    }

    /// All plans allowed, no caps.
    pub fn free(k: usize) -> Self {
        FeasibleSet {
            caps: vec![1.0; k],
            forbidden: vec![false; k],
        }
    }

    pub fn len(&self) -> usize {
        self.caps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caps.is_empty()
    }

    pub fn caps(&self) -> &[f64] {
        &self.caps
    }

    pub fn forbidden(&self) -> &[bool] {
        &self.forbidden
    }

    pub fn is_forbidden(&self, k: usize) -> bool {
        self.forbidden[k]
    }
}

fn check_weights(weights: &DVector<f64>) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidWeights(
            "weights must be finite and nonnegative".into(),
        ));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidWeights(format!(
            "weights sum to {s}, expected 1"
        )));
    }
    Ok(())
}

/// Min-max normalizes a cost vector to [0, 1]; a constant vector maps to 0.
pub fn minmax_normalize(c: &DVector<f64>) -> DVector<f64> {
    let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo <= 0.0 {
        return DVector::zeros(c.len());
    }
    c.map(|x| (x - lo) / (hi - lo))
}

/// Blends per-objective costs into a scalar cost per plan:
/// `h_k = sum_q w_q * chat_q(k)` with each objective min-max normalized.
pub fn assemble(costs: &[DVector<f64>], weights: &DVector<f64>) -> Result<DVector<f64>> {
    if costs.is_empty() {
        return Err(Error::EmptyCandidates {
            context: "cost assembly",
        });
    }
    if costs.len() != weights.len() {
        return Err(Error::LengthMismatch {
            context: "cost assembly",
            expected: costs.len(),
            got: weights.len(),
        });
    }
    check_weights(weights)?;
    let k = costs[0].len();
    let mut h = DVector::zeros(k);
    for (q, c) in costs.iter().enumerate() {
        if c.len() != k {
            return Err(Error::LengthMismatch {
                context: "cost vector",
                expected: k,
                got: c.len(),
            });
        }
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "cost vector",
            });
        }
        h += minmax_normalize(c) * weights[q];
    }
    Ok(h)
}

/// Diagonal operator `H = diag(h_k + rho * max(0, G_k)^2)`.
pub fn penalized_operator(
    h: &DVector<f64>,
    residuals: &DVector<f64>,
    rho: f64,
) -> Result<DiagOperator> {
    if h.len() != residuals.len() {
        return Err(Error::LengthMismatch {
            context: "penalized operator",
            expected: h.len(),
            got: residuals.len(),
        });
    }
    if !rho.is_finite() || rho < 0.0 {
        return Err(Error::NonFinite {
            context: "penalty strength",
        });
    }
    let d = DVector::from_fn(h.len(), |k, _| {
        let g = residuals[k].max(0.0);
        h[k] + rho * g * g
    });
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "penalized operator",
        });
    }
    Ok(DiagOperator(d))
}

/// Quadratic energy `psi^T H psi`.
pub fn energy(psi: &Amplitudes, op: &DiagOperator) -> f64 {
    psi.as_slice()
        .iter()
        .zip(op.0.iter())
        .map(|(a, d)| d * a * a)
        .sum()
}

/// Energy gradient `2 H psi`.
pub fn energy_gradient(psi: &Amplitudes, op: &DiagOperator) -> DVector<f64> {
    DVector::from_fn(psi.len(), |k, _| 2.0 * op.0[k] * psi.as_slice()[k])
}

/// Sphere-tangent descent direction `d = -g + lambda * psi` with
/// `lambda = psi^T g` (Rayleigh projection); `d` is orthogonal to `psi`.
pub fn descent_direction(psi: &Amplitudes, grad: &DVector<f64>) -> DVector<f64> {
    let lambda = psi.as_vector().dot(grad);
    -grad + psi.as_vector() * lambda
}

/// Sufficient-decrease certificate:
/// `e_next - e_prev <= -eta * g^2 + eta^2 * L * g^2` (tiny fp slack).
///
/// `grad_norm` is the norm of the tangent step direction: the radial gradient
/// component is unreachable on the sphere, so including it would make the
/// bound unsatisfiable near optima for every step size.
pub fn descent_certificate(
    e_prev: f64,
    e_next: f64,
    eta: f64,
    grad_norm: f64,
    lipschitz: f64,
) -> bool {
    let g2 = grad_norm * grad_norm;
    e_next - e_prev <= -eta * g2 + eta * eta * lipschitz * g2 + 1e-14
}

/// Capped Tchebycheff weight refresh: minimizes
/// `max_q alpha_q * (current_q - ideal_q)` over the simplex with
/// `alpha_q >= alpha_min`. Grid search for 2-3 objectives, projected
/// subgradient for 4. Returns `(weights, value)`; grid ties resolve to the
/// lexicographically smallest weight vector on the solver grid.
pub fn tchebycheff(
    current: &[f64],
    ideal: &[f64],
    alpha_min: f64,
) -> Result<(DVector<f64>, f64)> {
    let q = current.len();
    if ideal.len() != q {
        return Err(Error::LengthMismatch {
            context: "tchebycheff",
            expected: q,
            got: ideal.len(),
        });
    }
    if !(2..=4).contains(&q) {
        return Err(Error::UnsupportedObjectives(q));
    }
    if !(0.0..=1.0 / q as f64).contains(&alpha_min) {
        return Err(Error::InvalidWeights(format!(
            "alpha_min {alpha_min} outside [0, 1/{q}]"
        )));
    }
    let d: Vec<f64> = current.iter().zip(ideal).map(|(c, i)| c - i).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "tchebycheff deviations",
        });
    }
    let value = |alpha: &[f64]| -> f64 {
        alpha
            .iter()
            .zip(&d)
            .map(|(a, dv)| a * dv)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    match q {
        2 => {
            let n = 10_001;
            let lo = alpha_min;
            let hi = 1.0 - alpha_min;
            let mut best = vec![lo, 1.0 - lo];
            let mut best_v = value(&best);
            for i in 1..n {
                let a0 = lo + (hi - lo) * i as f64 / (n - 1) as f64;
                let cand = [a0, 1.0 - a0];
                let v = value(&cand);
                if v < best_v {
                    best_v = v;
                    best = cand.to_vec();
                }
            }
            Ok((DVector::from_vec(best), best_v))
        }
        3 => {
            let m = 140usize;
            let span = 1.0 - 3.0 * alpha_min;
            let step = span / m as f64;
            let mut best = vec![alpha_min, alpha_min, 1.0 - 2.0 * alpha_min];
            let mut best_v = f64::INFINITY;
            for i in 0..=m {
                for j in 0..=(m - i) {
                    let a0 = alpha_min + i as f64 * step;
                    let a1 = alpha_min + j as f64 * step;
                    let a2 = 1.0 - a0 - a1;
                    let cand = [a0, a1, a2];
                    let v = value(&cand);
                    if v < best_v {
                        best_v = v;
                        best = cand.to_vec();
                    }
                }
            }
            Ok((DVector::from_vec(best), best_v))
        }
        _ => {
            // Projected subgradient on the alpha_min-shifted simplex.
            let mass = 1.0 - q as f64 * alpha_min;
            let scale = d.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
            let mut alpha = vec![1.0 / q as f64; q];
            let mut best = alpha.clone();
            let mut best_v = value(&alpha);
            for t in 1..=600 {
                let worst = {
                    let mut w = 0;
                    for i in 1..q {
                        if alpha[i] * d[i] > alpha[w] * d[w] {
                            w = i;
                        }
                    }
                    w
                };
                let step = 0.5 / (scale * (t as f64).sqrt());
                alpha[worst] -= step * d[worst];
                project_simplex_shifted(&mut alpha, alpha_min, mass);
                let v = value(&alpha);
                if v < best_v {
                    best_v = v;
                    best = alpha.clone();
                }
            }
            Ok((DVector::from_vec(best), best_v))
        }
    }
}

/// Euclidean projection of `alpha` onto `{a : a_i >= lo, sum a = lo*q + mass}`.
fn project_simplex_shifted(alpha: &mut [f64], lo: f64, mass: f64) {
    let q = alpha.len();
    let mut beta: Vec<f64> = alpha.iter().map(|a| a - lo).collect();
    let mut sorted = beta.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        acc += v;
        let t = (acc - mass) / (i as f64 + 1.0);
        if v - t > 0.0 {
            theta = t;
        }
    }
    for (a, b) in alpha.iter_mut().zip(beta.iter_mut()) {
        *b = (*b - theta).max(0.0);
        *a = *b + lo;
    }
    let _ = q;
}

/// Projects a state onto the feasible set: forbidden coordinates are zeroed
/// and capped probabilities are water-filled — over-cap coordinates are
/// pinned at their caps and the remaining mass is rescaled over the free
/// pool, repeating until no cap is exceeded (each round pins at least one
/// coordinate, so at most K+1 rounds). This is the exact fixed point of
/// alternating zero/clip/renormalize. Signs of surviving amplitudes are
/// preserved; coordinates that receive mass from nothing (degenerate pool)
/// come out positive.
pub fn project_feasible(psi: &Amplitudes, fs: &FeasibleSet) -> Result<Amplitudes> {
    if fs.len() != psi.len() {
        return Err(Error::LengthMismatch {
            context: "feasibility projection",
            expected: psi.len(),
            got: fs.len(),
        });
    }
    let k = psi.len();
    let p0: Vec<f64> = psi.as_slice().iter().map(|a| a * a).collect();
    let mut out = vec![0.0; k];
    let mut pinned: Vec<bool> = fs.forbidden.clone();
    let mut rounds = 0usize;
    loop {
        rounds += 1;
        if rounds > k + 1 {
            return Err(Error::NoFeasiblePoint { rounds });
        }
        let pinned_mass: f64 = (0..k).filter(|&i| pinned[i]).map(|i| out[i]).sum();
        let free_mass = 1.0 - pinned_mass;
        if free_mass <= 1e-12 {
            break;
        }
        let pool: Vec<usize> = (0..k).filter(|&i| !pinned[i]).collect();
        if pool.is_empty() {
            return Err(Error::NoFeasiblePoint { rounds });
        }
        let s: f64 = pool.iter().map(|&i| p0[i]).sum();
        if s <= 1e-300 {
            // The free pool carries no mass of its own: spread the remainder
            // uniformly, still respecting caps.
            let share = free_mass / pool.len() as f64;
            let mut overflowed = false;
            for &i in &pool {
                if fs.caps[i] < share {
                    out[i] = fs.caps[i];
                    pinned[i] = true;
                    overflowed = true;
                }
            }
            if !overflowed {
                for &i in &pool {
                    out[i] = share;
                }
                break;
            }
        } else {
            let scale = free_mass / s;
            let mut pinned_any = false;
            for &i in &pool {
                if p0[i] * scale > fs.caps[i] {
                    out[i] = fs.caps[i];
                    pinned[i] = true;
                    pinned_any = true;
                }
            }
            if !pinned_any {
                for &i in &pool {
                    out[i] = p0[i] * scale;
                }
                break;
            }
        }
    }
    let v = DVector::from_fn(k, |i, _| {
        let sign = if psi.as_slice()[i] < 0.0 { -1.0 } else { 1.0 };
        sign * out[i].sqrt()
    });
    qstate::normalize(&v)
}
