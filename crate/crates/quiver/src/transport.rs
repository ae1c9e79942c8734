//! Entropic optimal transport for capacity-aware dispatch.
//!
//! Couples a capacity marginal (rows, e.g. fog compute shares) to a demand
//! marginal (columns, e.g. the soft plan distribution) against a cost matrix.
//! The solver is log-domain Sinkhorn with damped simultaneous (Jacobi)
//! potential updates: both potentials are refreshed from the previous iterate
//! and averaged with it. Averaging is what makes the parallel update converge
//! (undamped Jacobi splits into two interleaved chains whose mass constants
//! drift apart), and the simultaneous form makes the iteration map exactly
//! transpose-equivariant - transposing the cost and swapping the marginals
//! transposes the coupling bit-for-bit. A greedy cheapest-cell fill is
//! provided as the ablation baseline.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default entropic regularization strength.
pub const DEFAULT_EPSILON: f64 = 1e-2;
/// Default L1 marginal tolerance.
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
/// Default iteration cap.
pub const DEFAULT_MAX_ITERS: usize = 10_000;

/// A transport instance: cost matrix, row/column marginals, regularization.
#[derive(Debug, Clone)]
pub struct TransportProblem {
    pub cost: DMatrix<f64>,
    pub row_marginal: DVector<f64>,
    pub col_marginal: DVector<f64>,
    pub epsilon: f64,
}

impl TransportProblem {
    /// Validates shapes, marginal nonnegativity and normalization (1e-9), and
    /// finiteness.
    pub fn new(
        cost: DMatrix<f64>,
        row_marginal: DVector<f64>,
        col_marginal: DVector<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        if cost.nrows() != row_marginal.len() || cost.ncols() != col_marginal.len() {
            return Err(Error::DimMismatch {
                context: "transport problem",
                detail: format!(
                    "cost is {}x{}, marginals are {} and {}",
                    cost.nrows(),
                    cost.ncols(),
                    row_marginal.len(),
                    col_marginal.len()
                ),
            });
        }
        if cost.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "transport cost",
            });
        }
        for (name, m) in [("row", &row_marginal), ("col", &col_marginal)] {
            if m.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::InvalidMarginals(format!(
                    "{name} marginal has negative or non-finite entries"
                )));
            }
            let s: f64 = m.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidMarginals(format!(
                    "{name} marginal sums to {s}, expected 1"
                )));
            }
        }
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::InvalidMarginals(format!(
                "epsilon {epsilon} must be positive"
            )));
        }
        Ok(TransportProblem {
            cost,
            row_marginal,
            col_marginal,
            epsilon,
        })
    }
}

/// A coupling with its convergence record.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: DMatrix<f64>,
    pub iterations: usize,
    pub marginal_error: f64,
}

/// Total L1 deviation of the coupling's marginals from the targets.
pub fn marginal_error(coupling: &DMatrix<f64>, mu: &DVector<f64>, nu: &DVector<f64>) -> f64 {
    let mut err = 0.0;
    for i in 0..coupling.nrows() {
        let mut s = 0.0;
        for j in 0..coupling.ncols() {
            s += coupling[(i, j)];
        }
        err += (s - mu[i]).abs();
    }
    for j in 0..coupling.ncols() {
        let mut s = 0.0;
        for i in 0..coupling.nrows() {
            s += coupling[(i, j)];
        }
        err += (s - nu[j]).abs();
    }
    err
}

/// Log-sum-exp over an iterator of finite-or-neg-infinite values.
fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = values.map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// Entropic OT by log-domain Sinkhorn with Jacobi potential updates.
///
/// Stops when the total L1 marginal error drops to `tol`; errors with
/// `NotConverged` (carrying the iteration count and last error) if `max_iters`
/// is exhausted first. Zero-mass marginal entries are handled exactly: their
/// potentials stay at negative infinity and the corresponding rows/columns of
/// the coupling are zero.
pub fn sinkhorn(problem: &TransportProblem, tol: f64, max_iters: usize) -> Result<TransportPlan> {
    let (nr, nc) = (problem.cost.nrows(), problem.cost.ncols());
    let eps = problem.epsilon;
    let log_mu: Vec<f64> = problem.row_marginal.iter().map(|&m| m.ln()).collect();
    let log_nu: Vec<f64> = problem.col_marginal.iter().map(|&m| m.ln()).collect();
    let mut f = vec![0.0f64; nr];
    let mut g = vec![0.0f64; nc];
    for (fi, &lm) in f.iter_mut().zip(&log_mu) {
        if lm == f64::NEG_INFINITY {
            *fi = f64::NEG_INFINITY;
        }
    }
    for (gj, &ln) in g.iter_mut().zip(&log_nu) {
        if ln == f64::NEG_INFINITY {
            *gj = f64::NEG_INFINITY;
        }
    }

    let coupling_of = |f: &[f64], g: &[f64]| -> DMatrix<f64> {
        DMatrix::from_fn(nr, nc, |i, j| {
            let e = (f[i] + g[j] - problem.cost[(i, j)]) / eps;
            if e == f64::NEG_INFINITY {
                0.0
            } else {
                e.exp()
            }
        })
    };

    let mut best_err = f64::INFINITY;
    for it in 1..=max_iters {
        // Damped Jacobi update: both potentials from the previous iterate,
        // averaged 50/50 with it.
        let mut f_next = vec![f64::NEG_INFINITY; nr];
        for i in 0..nr {
            if log_mu[i] == f64::NEG_INFINITY {
                continue;
            }
            let row = (0..nc).map(|j| (g[j] - problem.cost[(i, j)]) / eps);
            f_next[i] = 0.5 * f[i] + 0.5 * (eps * (log_mu[i] - lse(row)));
        }
        let mut g_next = vec![f64::NEG_INFINITY; nc];
        for j in 0..nc {
            if log_nu[j] == f64::NEG_INFINITY {
                continue;
            }
            let col = (0..nr).map(|i| (f[i] - problem.cost[(i, j)]) / eps);
            g_next[j] = 0.5 * g[j] + 0.5 * (eps * (log_nu[j] - lse(col)));
        }
        f = f_next;
        g = g_next;

        let pi = coupling_of(&f, &g);
        let err = marginal_error(&pi, &problem.row_marginal, &problem.col_marginal);
        if !err.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: "non-finite marginal error in sinkhorn".into(),
            });
        }
        best_err = err;
        if err <= tol {
            return Ok(TransportPlan {
                coupling: pi,
                iterations: it,
                marginal_error: err,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: max_iters,
        residual: best_err,
    })
}

/// Objective value `sum(pi * D) + eps * sum(pi * ln pi)` with 0 ln 0 = 0.
pub fn transport_objective(plan: &TransportPlan, problem: &TransportProblem) -> f64 {
    let mut linear = 0.0;
    let mut entropy = 0.0;
    for j in 0..problem.cost.ncols() {
        for i in 0..problem.cost.nrows() {
            let p = plan.coupling[(i, j)];
            linear += p * problem.cost[(i, j)];
            if p > 0.0 {
                entropy += p * p.ln();
            }
        }
    }
    linear + problem.epsilon * entropy
}

/// Linear transport cost `sum(pi * D)` without the entropic term.
pub fn linear_cost(plan: &TransportPlan, problem: &TransportProblem) -> f64 {
    let mut linear = 0.0;
    for j in 0..problem.cost.ncols() {
        for i in 0..problem.cost.nrows() {
            linear += plan.coupling[(i, j)] * problem.cost[(i, j)];
        }
    }
    linear
}

/// Greedy baseline: fills cells in ascending cost order (ties: lowest row,
/// then lowest column), saturating `min(remaining row, remaining column)` at
/// each step. Marginal-feasible by construction; generally suboptimal.
pub fn assign_greedy(problem: &TransportProblem) -> TransportPlan {
    let (nr, nc) = (problem.cost.nrows(), problem.cost.ncols());
    let mut cells: Vec<(usize, usize)> = (0..nr)
        .flat_map(|i| (0..nc).map(move |j| (i, j)))
        .collect();
    cells.sort_by(|&(i1, j1), &(i2, j2)| {
        problem.cost[(i1, j1)]
            .partial_cmp(&problem.cost[(i2, j2)])
            .unwrap()
            .then(i1.cmp(&i2))
            .then(j1.cmp(&j2))
    });
    let mut row_rem: Vec<f64> = problem.row_marginal.iter().copied().collect();
    let mut col_rem: Vec<f64> = problem.col_marginal.iter().copied().collect();
    let mut pi = DMatrix::zeros(nr, nc);
    for (i, j) in cells {
        let m = row_rem[i].min(col_rem[j]);
        if m > 0.0 {
            pi[(i, j)] = m;
            row_rem[i] -= m;
            col_rem[j] -= m;
        }
    }
    let err = marginal_error(&pi, &problem.row_marginal, &problem.col_marginal);
    TransportPlan {
        coupling: pi,
        iterations: 0,
        marginal_error: err,
    }
}
