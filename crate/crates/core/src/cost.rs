//! The control objective `F = F_o + beta * F_v`, its reward, and exact
//! gradients with respect to the boundary data.
//!
//! `F_o` is the tracking term: a per-cell mean of `(y - y_d)^2 / 2` over the
//! interior plus `alpha/2` times the per-value mean of `(u - u_d)^2` on the
//! boundary. `F_v` penalizes bound violations through one-sided quadratic
//! barriers: a value exceeding its upper bound by `v` (or undershooting the
//! lower bound by `v`) contributes `v^2`. The gradient is computed with one
//! adjoint solve against the same 5-point operator, so one forward and one
//! adjoint solve yield the exact derivative of the discrete objective.

use crate::error::{Error, Result};
use crate::flops::{self, Category};
use crate::grid::{BoundaryValues, Grid};
use crate::poisson;
use crate::problem::Problem;

/// Violations smaller than this are treated as exact zeros, both in the
/// penalty and in the reported statistics, to absorb solver roundoff.
pub const VIOLATION_EPS: f64 = 1e-12;

/// Weights and penalty factor of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostConfig {
    /// Penalty factor on the violation term.
    pub beta: f64,
    /// Quadrature weight of the interior sums, `1/n^2` by default so costs
    /// are per-cell and comparable across grid sizes.
    pub domain_weight: f64,
    /// Quadrature weight of the boundary sums, `1/(4n)` by default.
    pub boundary_weight: f64,
    /// Residual tolerance forwarded to the state and adjoint solves.
    pub solver_tol: f64,
}

impl CostConfig {
    /// Default configuration for a grid: `beta = 1e4`, per-cell weights.
    pub fn for_grid(grid: Grid) -> Self {
        let n = grid.n() as f64;
        CostConfig {
            beta: 1e4,
            domain_weight: 1.0 / (n * n),
            boundary_weight: 1.0 / (4.0 * n),
            solver_tol: poisson::DEFAULT_TOL,
        }
    }
}

/// Evaluated objective with its decomposition and violation statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    /// Total objective `f_o + beta * f_v`.
    pub f: f64,
    /// Tracking part.
    pub f_o: f64,
    /// Violation part (before the `beta` factor).
    pub f_v: f64,
    /// Largest single violation over interior and boundary values.
    pub max_violation: f64,
    /// Mean violation over all `n^2 + 4n` constrained values, counting
    /// satisfied values as zero.
    pub mean_violation: f64,
    /// Number of values violating a bound by at least [`VIOLATION_EPS`].
    pub violated_cells: usize,
}

impl CostBreakdown {
    /// The reward is the negated cost.
    pub fn reward(&self) -> f64 {
        -self.f
    }
}

/// Violation magnitude of `x` against `[lo, hi]`; zero when inside or within
/// [`VIOLATION_EPS`] of a bound.
fn violation(x: f64, lo: f64, hi: f64) -> f64 {
    let v = if x > hi {
        x - hi
    } else if x < lo {
        lo - x
    } else {
        0.0
    };
    if v < VIOLATION_EPS {
        0.0
    } else {
        v
    }
}

/// Derivative of the one-sided quadratic barrier at `x`; zero inside the
/// bounds and at the kinks.
fn barrier_slope(x: f64, lo: f64, hi: f64) -> f64 {
    if x - hi >= VIOLATION_EPS {
        2.0 * (x - hi)
    } else if lo - x >= VIOLATION_EPS {
        2.0 * (x - lo)
    } else {
        0.0
    }
}

struct Accumulated {
    breakdown: CostBreakdown,
    y: Vec<f64>,
}

fn check_grid(problem: &Problem, u: &BoundaryValues) -> Result<()> {
    if u.grid() != problem.grid {
        return Err(Error::GridMismatch {
            expected: problem.grid.n(),
            actual: u.grid().n(),
        });
    }
    Ok(())
}

fn evaluate_inner(problem: &Problem, u: &BoundaryValues, cfg: &CostConfig) -> Result<Accumulated> {
    check_grid(problem, u)?;
    let grid = problem.grid;
    let n = grid.n();
    let basis = poisson::source_basis(grid)?;
    let y = poisson::solve_via_superposition_with_tol(grid, u, problem.c, &basis, cfg.solver_tol)?;

    let mut track_domain = 0.0;
    let mut barrier_domain = 0.0;
    let mut vio_sum = 0.0;
    let mut vio_max = 0.0f64;
    let mut vio_count = 0usize;
    for (yi, ydi) in y.values().iter().zip(problem.y_d.values()) {
        let d = yi - ydi;
        track_domain += d * d;
        let v = violation(*yi, problem.y_min, problem.y_max);
        barrier_domain += v * v;
        vio_sum += v;
        vio_max = vio_max.max(v);
        vio_count += (v > 0.0) as usize;
    }

    let mut track_boundary = 0.0;
    let mut barrier_boundary = 0.0;
    for (uj, udj) in u.iter().zip(problem.u_d.iter()) {
        let d = uj - udj;
        track_boundary += d * d;
        let v = violation(uj, problem.u_min, problem.u_max);
        barrier_boundary += v * v;
        vio_sum += v;
        vio_max = vio_max.max(v);
        vio_count += (v > 0.0) as usize;
    }

    let f_o = cfg.domain_weight * 0.5 * track_domain
        + cfg.boundary_weight * (problem.alpha / 2.0) * track_boundary;
    let f_v = cfg.domain_weight * barrier_domain + cfg.boundary_weight * barrier_boundary;
    let total_values = (n * n + 4 * n) as f64;
    flops::add(Category::Cost, (8 * n * n + 40 * n) as u64);

    Ok(Accumulated {
        breakdown: CostBreakdown {
            f: f_o + cfg.beta * f_v,
            f_o,
            f_v,
            max_violation: vio_max,
            mean_violation: vio_sum / total_values,
            violated_cells: vio_count,
        },
        y: y.values().to_vec(),
    })
}

/// Evaluate the objective at boundary control `u`.
pub fn evaluate(problem: &Problem, u: &BoundaryValues, cfg: &CostConfig) -> Result<CostBreakdown> {
    Ok(evaluate_inner(problem, u, cfg)?.breakdown)
}

/// Evaluate the objective and its exact gradient sharing one forward solve.
pub fn evaluate_with_gradient(
    problem: &Problem,
    u: &BoundaryValues,
    cfg: &CostConfig,
) -> Result<(CostBreakdown, BoundaryValues)> {
    let acc = evaluate_inner(problem, u, cfg)?;
    let grid = problem.grid;
    let n = grid.n();
    let h2 = grid.h() * grid.h();

    // adjoint right-hand side: domain_weight * [(y - y_d) + beta * barrier']
    let mut rhs = Vec::with_capacity(n * n);
    for (yi, ydi) in acc.y.iter().zip(problem.y_d.values()) {
        let slope = barrier_slope(*yi, problem.y_min, problem.y_max);
        rhs.push(cfg.domain_weight * ((yi - ydi) + cfg.beta * slope));
    }
    let lambda = poisson::solve_adjoint(grid, &rhs, cfg.solver_tol)?;

    // chain through the boundary coupling: element j touches one interior
    // node with weight 1/h^2, plus the direct alpha and barrier terms
    let direct = |uj: f64, udj: f64| {
        cfg.boundary_weight
            * (problem.alpha * (uj - udj)
                + cfg.beta * barrier_slope(uj, problem.u_min, problem.u_max))
    };
    let mut top = Vec::with_capacity(n);
    let mut bottom = Vec::with_capacity(n);
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for j in 0..n {
        top.push(lambda[j] / h2 + direct(u.top[j], problem.u_d.top[j]));
        bottom.push(lambda[(n - 1) * n + j] / h2 + direct(u.bottom[j], problem.u_d.bottom[j]));
    }
    for i in 0..n {
        left.push(lambda[i * n] / h2 + direct(u.left[i], problem.u_d.left[i]));
        right.push(lambda[i * n + n - 1] / h2 + direct(u.right[i], problem.u_d.right[i]));
    }
    flops::add(Category::Cost, (6 * n * n + 32 * n) as u64);

    Ok((
        acc.breakdown,
        BoundaryValues::new(grid, top, bottom, left, right),
    ))
}

/// Exact gradient `dF/du` via the adjoint method.
pub fn gradient(problem: &Problem, u: &BoundaryValues, cfg: &CostConfig) -> Result<BoundaryValues> {
    Ok(evaluate_with_gradient(problem, u, cfg)?.1)
}

/// Central-difference gradient, the oracle for [`gradient`]. Costs `8n`
/// forward solves.
pub fn finite_difference_gradient(
    problem: &Problem,
    u: &BoundaryValues,
    cfg: &CostConfig,
    step: f64,
) -> Result<BoundaryValues> {
    assert!(step > 0.0, "step must be positive");
    check_grid(problem, u)?;
    let grid = problem.grid;
    let n = grid.n();
    let mut ring = crate::grid::as_ring(u);
    let mut out = vec![0.0; 4 * n];
    for j in 0..4 * n {
        let original = ring[j];
        ring[j] = original + step;
        let fp = evaluate(problem, &crate::grid::from_ring(grid, &ring), cfg)?.f;
        ring[j] = original - step;
        let fm = evaluate(problem, &crate::grid::from_ring(grid, &ring), cfg)?.f;
        ring[j] = original;
        out[j] = (fp - fm) / (2.0 * step);
    }
    Ok(crate::grid::from_ring(grid, &out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DomainField;
    use crate::problem::{ProfileExpression, UNBOUNDED_BELOW};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_expr() -> ProfileExpression {
        ProfileExpression {
            quad1: (0, 0),
            quad2: (0, 0),
            sin1: None,
            sin2: None,
        }
    }

    /// A problem with explicit fields; `expr` is a placeholder since tests
    /// set `y_d` directly.
    fn problem_with(
        grid: Grid,
        alpha: f64,
        c: f64,
        y_d: DomainField,
        bounds: (f64, f64, f64, f64),
    ) -> Problem {
        Problem {
            id: 0,
            grid,
            alpha,
            c,
            expr: zero_expr(),
            y_d,
            u_d: BoundaryValues::zeros(grid),
            y_min: bounds.0,
            y_max: bounds.1,
            u_min: bounds.2,
            u_max: bounds.3,
        }
    }

    fn loose() -> (f64, f64, f64, f64) {
        (UNBOUNDED_BELOW, 1e20, -1e20, 1e20)
    }

    fn random_boundary(grid: Grid, seed: u64, lo: f64, hi: f64) -> BoundaryValues {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.n();
        let mut edge = |_: usize| (0..n).map(|_| rng.random_range(lo..hi)).collect();
        BoundaryValues::new(grid, edge(0), edge(1), edge(2), edge(3))
    }

    fn rel_inf_err(a: &BoundaryValues, b: &BoundaryValues) -> f64 {
        let scale = b.max_abs().max(1e-12);
        a.max_abs_diff(b) / scale
    }

    #[test]
    fn exact_match_costs_nothing() {
        let grid = Grid::new(6);
        let u_star = random_boundary(grid, 3, -0.5, 0.5);
        let y_d = poisson::solve_poisson(grid, &u_star, -20.0, 1e-12).unwrap();
        let p = problem_with(grid, 0.0, -20.0, y_d, loose());
        let cfg = CostConfig::for_grid(grid);
        let b = evaluate(&p, &u_star, &cfg).unwrap();
        assert!(b.f < 1e-15, "f = {}", b.f);
        assert_eq!(b.f_v, 0.0);
        assert_eq!(b.violated_cells, 0);
        assert_eq!(b.reward(), -b.f);
    }

    #[test]
    fn single_cell_objective() {
        // n = 1, u = (1,1,1,1), c = 0 gives y = 1; with y_d = 0, alpha = 0.01
        // and per-cell weights: F_o = 1/2 + (1/4)(0.01/2)*4 = 0.505
        let grid = Grid::new(1);
        let p = problem_with(grid, 0.01, 0.0, DomainField::zeros(grid), loose());
        let cfg = CostConfig::for_grid(grid);
        let u = BoundaryValues::constant(grid, 1.0);
        let b = evaluate(&p, &u, &cfg).unwrap();
        assert!((b.f_o - 0.505).abs() < 1e-10, "f_o = {}", b.f_o);
        assert_eq!(b.f_v, 0.0);
        assert!((b.f - b.f_o).abs() < 1e-15);
    }

    #[test]
    fn single_cell_barrier() {
        // same setup with y_max = 0.5: y = 1 violates by 0.5, f_v = 0.25
        let grid = Grid::new(1);
        let p = problem_with(
            grid,
            0.01,
            0.0,
            DomainField::zeros(grid),
            (UNBOUNDED_BELOW, 0.5, -1e20, 1e20),
        );
        let cfg = CostConfig::for_grid(grid);
        let u = BoundaryValues::constant(grid, 1.0);
        let b = evaluate(&p, &u, &cfg).unwrap();
        assert!((b.f_v - 0.25).abs() < 1e-10, "f_v = {}", b.f_v);
        assert!((b.max_violation - 0.5).abs() < 1e-10);
        assert_eq!(b.violated_cells, 1);
        assert!((b.f - (b.f_o + cfg.beta * b.f_v)).abs() < 1e-9);
    }

    #[test]
    fn single_cell_gradient() {
        // dF/du_j = (1/h^2) * lambda + bw * alpha * u_j
        //         = 4 * (1/16) + 0.25 * 0.01 = 0.2525 for each element
        let grid = Grid::new(1);
        let p = problem_with(grid, 0.01, 0.0, DomainField::zeros(grid), loose());
        let cfg = CostConfig::for_grid(grid);
        let u = BoundaryValues::constant(grid, 1.0);
        let g = gradient(&p, &u, &cfg).unwrap();
        for v in g.iter() {
            assert!((v - 0.2525).abs() < 1e-9, "gradient element {v}");
        }
    }

    #[test]
    fn gradient_vanishes_at_match() {
        let grid = Grid::new(5);
        let y_d = poisson::solve_poisson(grid, &BoundaryValues::zeros(grid), -30.0, 1e-12).unwrap();
        let p = problem_with(grid, 0.01, -30.0, y_d, loose());
        let cfg = CostConfig::for_grid(grid);
        let u = BoundaryValues::zeros(grid);
        let g = gradient(&p, &u, &cfg).unwrap();
        assert!(g.max_abs() < 1e-9, "gradient norm {}", g.max_abs());
        let fd = finite_difference_gradient(&p, &u, &cfg, 1e-5).unwrap();
        assert!(fd.max_abs() < 1e-8, "fd norm {}", fd.max_abs());
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        for (n, seed) in [(4usize, 1u64), (8, 2)] {
            let grid = Grid::new(n);
            let y_d = DomainField::from_fn(grid, |x1, x2| x1 * x1 - x2 + 0.5 * (x1 * x2).sin());
            // bounds tight enough that some values violate, so the barrier
            // terms participate in the check
            let p = problem_with(grid, 0.01, -20.0, y_d, (-0.1, 0.6, -0.4, 0.7));
            let cfg = CostConfig::for_grid(grid);
            let u = random_boundary(grid, seed, -0.6, 0.9);
            let g = gradient(&p, &u, &cfg).unwrap();
            let fd = finite_difference_gradient(&p, &u, &cfg, 1e-5).unwrap();
            let err = rel_inf_err(&g, &fd);
            assert!(err < 1e-6, "n = {n}: relative error {err}");
        }
    }

    #[test]
    fn alpha_term_alone() {
        // with y_d equal to the reached state and no violations the adjoint
        // vanishes, leaving exactly boundary_weight * alpha * u
        let grid = Grid::new(4);
        let u = random_boundary(grid, 9, -0.3, 0.3);
        let y_d = poisson::solve_poisson(grid, &u, -10.0, 1e-12).unwrap();
        let p = problem_with(grid, 0.01, -10.0, y_d, loose());
        let cfg = CostConfig::for_grid(grid);
        let g = gradient(&p, &u, &cfg).unwrap();
        let expect: Vec<f64> = crate::grid::as_ring(&u)
            .iter()
            .map(|uj| cfg.boundary_weight * p.alpha * uj)
            .collect();
        let got = crate::grid::as_ring(&g);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn barriers_are_one_sided() {
        let grid = Grid::new(5);
        let u = random_boundary(grid, 13, -0.2, 0.4);
        let y = poisson::solve_poisson(grid, &u, -10.0, 1e-12).unwrap();
        let y_d = DomainField::from_fn(grid, |x1, _| x1);
        let cfg = CostConfig::for_grid(grid);

        let wide = problem_with(grid, 0.01, -10.0, y_d.clone(), loose());
        let snug = problem_with(
            grid,
            0.01,
            -10.0,
            y_d,
            (y.min() - 0.1, y.max() + 0.1, -0.3, 0.5),
        );
        let fw = evaluate(&wide, &u, &cfg).unwrap();
        let fs = evaluate(&snug, &u, &cfg).unwrap();
        assert_eq!(fw.f_v, 0.0);
        assert_eq!(fs.f_v, 0.0);
        assert_eq!(fw.f, fs.f);
    }

    #[test]
    fn beta_monotonicity() {
        let grid = Grid::new(4);
        let y_d = DomainField::from_fn(grid, |x1, x2| x1 + x2);
        let p = problem_with(grid, 0.01, -20.0, y_d, (-0.05, 0.05, -0.05, 0.05));
        let u = BoundaryValues::constant(grid, 1.0); // infeasible
        let mut cfg = CostConfig::for_grid(grid);
        let f_low = evaluate(&p, &u, &cfg).unwrap();
        assert!(f_low.f_v > 0.0, "setup should violate bounds");
        cfg.beta *= 10.0;
        let f_high = evaluate(&p, &u, &cfg).unwrap();
        assert!(f_high.f > f_low.f);
    }

    #[test]
    fn grid_mismatch_detected() {
        let p = problem_with(
            Grid::new(4),
            0.01,
            0.0,
            DomainField::zeros(Grid::new(4)),
            loose(),
        );
        let cfg = CostConfig::for_grid(Grid::new(4));
        let u = BoundaryValues::zeros(Grid::new(5));
        assert!(matches!(
            evaluate(&p, &u, &cfg),
            Err(Error::GridMismatch { .. })
        ));
    }
}
