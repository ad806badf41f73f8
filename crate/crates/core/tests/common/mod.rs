//! Shared helpers for the integration tests: a dense direct solver that
//! serves as an independent oracle for the iterative PDE solver, and small
//! problem constructors.

use bctrl_core::grid::{BoundaryValues, DomainField, Grid};
use bctrl_core::problem::{Problem, ProfileExpression, UNBOUNDED_BELOW};

/// Solve the discrete Poisson system by dense LU with partial pivoting:
/// an independent check on the matrix-free conjugate-gradient path.
pub fn dense_poisson_solve(grid: Grid, boundary: &BoundaryValues, c: f64) -> Vec<f64> {
    let n = grid.n();
    let len = n * n;
    let inv_h2 = 1.0 / (grid.h() * grid.h());

    // assemble the 5-point operator row by row
    let mut a = vec![0.0f64; len * len];
    let mut rhs = vec![-c; len];
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            a[k * len + k] = 4.0 * inv_h2;
            // neighbor in the previous row (i-1, j), or the top boundary
            if i > 0 {
                a[k * len + (k - n)] = -inv_h2;
            } else {
                rhs[k] += boundary.top[j] * inv_h2;
            }
            // neighbor in the next row (i+1, j), or the bottom boundary
            if i + 1 < n {
                a[k * len + (k + n)] = -inv_h2;
            } else {
                rhs[k] += boundary.bottom[j] * inv_h2;
            }
            // left neighbor (i, j-1) or the left boundary
            if j > 0 {
                a[k * len + (k - 1)] = -inv_h2;
            } else {
                rhs[k] += boundary.left[i] * inv_h2;
            }
            // right neighbor (i, j+1) or the right boundary
            if j + 1 < n {
                a[k * len + (k + 1)] = -inv_h2;
            } else {
                rhs[k] += boundary.right[i] * inv_h2;
            }
        }
    }

    // LU factorization with partial pivoting, then forward/back substitution
    let mut perm: Vec<usize> = (0..len).collect();
    for col in 0..len {
        let pivot = (col..len)
            .max_by(|&r, &s| {
                a[r * len + col]
                    .abs()
                    .partial_cmp(&a[s * len + col].abs())
                    .unwrap()
            })
            .unwrap();
        if pivot != col {
            for j in 0..len {
                a.swap(col * len + j, pivot * len + j);
            }
            perm.swap(col, pivot);
        }
        let d = a[col * len + col];
        assert!(d != 0.0, "singular system");
        for row in col + 1..len {
            let factor = a[row * len + col] / d;
            a[row * len + col] = factor;
            for j in col + 1..len {
                a[row * len + j] -= factor * a[col * len + j];
            }
        }
    }
    let mut y = vec![0.0; len];
    for row in 0..len {
        let mut acc = rhs[perm[row]];
        for j in 0..row {
            acc -= a[row * len + j] * y[j];
        }
        y[row] = acc;
    }
    for row in (0..len).rev() {
        let mut acc = y[row];
        for j in row + 1..len {
            acc -= a[row * len + j] * y[j];
        }
        y[row] = acc / a[row * len + row];
    }
    y
}

/// A small problem with a hand-set desired profile (not expression-backed;
/// for in-process use only, not dataset serialization).
#[allow(dead_code)]
pub fn direct_problem(
    n: usize,
    c: f64,
    profile: impl Fn(f64, f64) -> f64,
    bounds: (f64, f64, f64),
) -> Problem {
    let grid = Grid::new(n);
    let (y_max, u_min, u_max) = bounds;
    Problem {
        id: 0,
        grid,
        alpha: bctrl_core::problem::ALPHA,
        c,
        expr: ProfileExpression {
            quad1: (0, 0),
            quad2: (0, 0),
            sin1: None,
            sin2: None,
        },
        y_d: DomainField::from_fn(grid, profile),
        u_d: BoundaryValues::zeros(grid),
        y_min: UNBOUNDED_BELOW,
        y_max,
        u_min,
        u_max,
    }
}
