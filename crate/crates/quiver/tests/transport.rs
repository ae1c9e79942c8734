//! Entropic transport contract tests.
//!
//! Small instances are checked against an independent linear-programming
//! oracle that enumerates the vertices of the transportation polytope
//! (all 5-cell bases of a 3x3 instance). Separable costs have a closed-form
//! entropic solution (the independent coupling), used as a second oracle.

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use quiver::transport::{
    assign_greedy, linear_cost, sinkhorn, transport_objective, TransportProblem,
};
use rand::Rng;

/// Exact minimum of `sum(pi * D)` over the transportation polytope, by
/// enumerating candidate bases (5 = nrows + ncols - 1 cells for 3x3).
fn lp_oracle(cost: &DMatrix<f64>, mu: &DVector<f64>, nu: &DVector<f64>) -> f64 {
    let (nr, nc) = (cost.nrows(), cost.ncols());
    let cells: Vec<(usize, usize)> = (0..nr)
        .flat_map(|i| (0..nc).map(move |j| (i, j)))
        .collect();
    let basis_size = nr + nc - 1;
    let mut best = f64::INFINITY;
    let n = cells.len();
    // Enumerate all basis_size-subsets of cells by bitmask.
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != basis_size {
            continue;
        }
        let chosen: Vec<(usize, usize)> = (0..n)
            .filter(|b| mask & (1 << b) != 0)
            .map(|b| cells[b])
            .collect();
        // Constraints: row sums = mu, col sums = nu.
        let mut a = DMatrix::zeros(nr + nc, basis_size);
        for (c, &(i, j)) in chosen.iter().enumerate() {
            a[(i, c)] = 1.0;
            a[(nr + j, c)] = 1.0;
        }
        let mut b = DVector::zeros(nr + nc);
        for i in 0..nr {
            b[i] = mu[i];
        }
        for j in 0..nc {
            b[nr + j] = nu[j];
        }
        let svd = a.clone().svd(true, true);
        let Ok(x) = svd.solve(&b, 1e-12) else {
            continue;
        };
        let resid = (&a * &x - &b).norm();
        if resid > 1e-9 || x.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let value: f64 = chosen
            .iter()
            .zip(x.iter())
            .map(|(&(i, j), &v)| v * cost[(i, j)])
            .sum();
        best = best.min(value);
    }
    best
}

fn random_problem(
    rng: &mut impl Rng,
    nr: usize,
    nc: usize,
    epsilon: f64,
    cost_floor: f64,
) -> TransportProblem {
    let cost = DMatrix::from_fn(nr, nc, |_, _| cost_floor + rng.gen_range(0.0..1.0));
    let mut mu = DVector::from_fn(nr, |_, _| rng.gen_range(0.05..1.0));
    let mut nu = DVector::from_fn(nc, |_, _| rng.gen_range(0.05..1.0));
    mu /= mu.iter().sum::<f64>();
    nu /= nu.iter().sum::<f64>();
    TransportProblem::new(cost, mu, nu, epsilon).unwrap()
}

#[test]
fn sinkhorn_matches_lp_vertex_oracle_at_small_epsilon() {
    let mut rng = quiver::rng::stream(31, "test.transport.lp");
    for _ in 0..8 {
        // Costs bounded away from zero keep the optimum large relative to the
        // entropic bias at epsilon = 1e-3.
        let p = random_problem(&mut rng, 3, 3, 1e-3, 0.5);
        let plan = sinkhorn(&p, 1e-6, 200_000).unwrap();
        let lp = lp_oracle(&p.cost, &p.row_marginal, &p.col_marginal);
        let lin = linear_cost(&plan, &p);
        // The entropic plan meets the marginals only to 1e-6 total mass, so
        // its linear cost may undercut the exact-LP optimum by up to that
        // misplaced mass times the cost range.
        let d_max = p.cost.iter().cloned().fold(0.0, f64::max);
        assert!(
            lin >= lp - 1e-6 * d_max - 1e-12,
            "entropic linear cost {lin} beats exact LP {lp} beyond feasibility slack"
        );
        assert!(
            (lin - lp) / lp <= 0.01,
            "linear cost {lin} more than 1% above LP optimum {lp}"
        );
    }
}

#[test]
fn separable_cost_yields_independent_coupling() {
    // D_ij = a_i + b_j: potentials absorb the cost, so the entropic optimum
    // is the product coupling mu nu^T at any epsilon.
    let mut rng = quiver::rng::stream(32, "test.transport.sep");
    for _ in 0..10 {
        let nr = rng.gen_range(2..5);
        let nc = rng.gen_range(2..5);
        let a: Vec<f64> = (0..nr).map(|_| rng.gen_range(0.0..2.0)).collect();
        let b: Vec<f64> = (0..nc).map(|_| rng.gen_range(0.0..2.0)).collect();
        let cost = DMatrix::from_fn(nr, nc, |i, j| a[i] + b[j]);
        let mut mu = DVector::from_fn(nr, |_, _| rng.gen_range(0.1..1.0));
        let mut nu = DVector::from_fn(nc, |_, _| rng.gen_range(0.1..1.0));
        mu /= mu.iter().sum::<f64>();
        nu /= nu.iter().sum::<f64>();
        let p = TransportProblem::new(cost, mu.clone(), nu.clone(), 0.05).unwrap();
        let plan = sinkhorn(&p, 1e-10, 50_000).unwrap();
        for i in 0..nr {
            for j in 0..nc {
                assert_abs_diff_eq!(plan.coupling[(i, j)], mu[i] * nu[j], epsilon = 1e-8);
            }
        }
    }
}

#[test]
fn marginals_converge_within_tolerance_on_random_instances() {
    let mut rng = quiver::rng::stream(33, "test.transport.marg");
    for _ in 0..40 {
        let nr = rng.gen_range(2..8);
        let nc = rng.gen_range(2..8);
        let p = random_problem(&mut rng, nr, nc, 1e-2, 0.0);
        let plan = sinkhorn(&p, 1e-6, 100_000).unwrap();
        assert!(plan.marginal_error <= 1e-6);
        assert!(plan.coupling.iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn transpose_equivariance_is_exact() {
    let mut rng = quiver::rng::stream(34, "test.transport.transpose");
    for _ in 0..10 {
        let nr = rng.gen_range(2..6);
        let nc = rng.gen_range(2..6);
        let p = random_problem(&mut rng, nr, nc, 2e-2, 0.0);
        let pt = TransportProblem::new(
            p.cost.transpose(),
            p.col_marginal.clone(),
            p.row_marginal.clone(),
            p.epsilon,
        )
        .unwrap();
        let plan = sinkhorn(&p, 1e-8, 20_000).unwrap();
        let plan_t = sinkhorn(&pt, 1e-8, 20_000).unwrap();
        assert_eq!(plan.iterations, plan_t.iterations);
        for i in 0..nr {
            for j in 0..nc {
                // Bitwise equality: the Jacobi iteration map commutes with
                // transposition exactly, not just approximately.
                assert_eq!(plan.coupling[(i, j)], plan_t.coupling[(j, i)]);
            }
        }
    }
}

#[test]
fn zero_marginal_rows_produce_zero_coupling_rows() {
    let cost = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    let mu = DVector::from_row_slice(&[0.5, 0.0, 0.5]);
    let nu = DVector::from_row_slice(&[0.6, 0.4]);
    let p = TransportProblem::new(cost, mu, nu, 1e-2).unwrap();
    let plan = sinkhorn(&p, 1e-8, 20_000).unwrap();
    for j in 0..2 {
        assert_eq!(plan.coupling[(1, j)], 0.0);
    }
    assert!(plan.marginal_error <= 1e-8);
}

#[test]
fn exhausted_iteration_budget_reports_not_converged() {
    let mut rng = quiver::rng::stream(35, "test.transport.budget");
    let p = random_problem(&mut rng, 4, 4, 1e-3, 0.0);
    match sinkhorn(&p, 1e-12, 2) {
        Err(quiver::Error::NotConverged {
            iterations,
            residual,
        }) => {
            assert_eq!(iterations, 2);
            assert!(residual > 1e-12);
        }
        other => panic!("expected NotConverged, got {other:?}"),
    }
}

#[test]
fn objective_includes_signed_entropy_term() {
    // Uniform 2x2 coupling: linear part 0.5, entropy sum = 4 * 0.25 ln 0.25.
    let cost = DMatrix::from_element(2, 2, 0.5);
    let mu = DVector::from_element(2, 0.5);
    let nu = DVector::from_element(2, 0.5);
    let p = TransportProblem::new(cost, mu, nu, 0.1).unwrap();
    let plan = sinkhorn(&p, 1e-10, 10_000).unwrap();
    let obj = transport_objective(&plan, &p);
    let expect = 0.5 + 0.1 * (4.0 * 0.25 * 0.25f64.ln());
    assert_abs_diff_eq!(obj, expect, epsilon = 1e-9);
}

#[test]
fn greedy_fills_cheapest_cells_first() {
    let cost = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 3.0]);
    let mu = DVector::from_row_slice(&[0.6, 0.4]);
    let nu = DVector::from_row_slice(&[0.5, 0.5]);
    let p = TransportProblem::new(cost, mu, nu, 1e-2).unwrap();
    let plan = assign_greedy(&p);
    assert_abs_diff_eq!(plan.coupling[(0, 0)], 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(plan.coupling[(0, 1)], 0.1, epsilon = 1e-15);
    assert_abs_diff_eq!(plan.coupling[(1, 0)], 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(plan.coupling[(1, 1)], 0.4, epsilon = 1e-15);
    assert!(plan.marginal_error <= 1e-12);
}

#[test]
fn greedy_never_beats_the_lp_optimum() {
    let mut rng = quiver::rng::stream(36, "test.transport.greedy");
    for _ in 0..10 {
        let p = random_problem(&mut rng, 3, 3, 1e-3, 0.0);
        let greedy = assign_greedy(&p);
        let lp = lp_oracle(&p.cost, &p.row_marginal, &p.col_marginal);
        let gcost = linear_cost(&greedy, &p);
        assert!(gcost >= lp - 1e-9);
    }
}

#[test]
fn problem_validation_rejects_bad_inputs() {
    let cost = DMatrix::from_element(2, 2, 1.0);
    let good = DVector::from_element(2, 0.5);
    assert!(TransportProblem::new(
        cost.clone(),
        DVector::from_row_slice(&[0.7, 0.7]),
        good.clone(),
        1e-2
    )
    .is_err());
    assert!(TransportProblem::new(
        cost.clone(),
        DVector::from_row_slice(&[-0.2, 1.2]),
        good.clone(),
        1e-2
    )
    .is_err());
    assert!(TransportProblem::new(cost.clone(), good.clone(), good.clone(), 0.0).is_err());
    assert!(TransportProblem::new(
        cost,
        DVector::from_element(3, 1.0 / 3.0),
        good,
        1e-2
    )
    .is_err());
}
