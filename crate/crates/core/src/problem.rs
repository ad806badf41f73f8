//! Randomized boundary-control problem generation and dataset persistence.
//!
//! A problem asks for boundary data steering the Poisson solution towards a
//! desired interior profile built from per-direction quadratic and
//! sine-squared terms. Generation draws the grid size, the profile, the bound
//! intervals and the sourcing term from a per-index RNG stream, then applies
//! two filters: profiles with too little variation are discarded, as are
//! problems whose reference cost is too high to be interesting.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{BoundaryValues, DomainField, Grid};

/// Control regularization weight shared by every generated problem.
pub const ALPHA: f64 = 0.01;

/// Sentinel for "no lower bound" on the domain values.
pub const UNBOUNDED_BELOW: f64 = -1e20;

/// Admissible sourcing terms.
pub const SOURCING_TERMS: [f64; 6] = [0.0, -10.0, -20.0, -30.0, -40.0, -50.0];

/// Profiles with `max - min` below this are discarded.
pub const RANGE_FILTER: f64 = 0.3;

/// Problems whose per-cell reference cost exceeds this are discarded.
pub const COST_FILTER: f64 = 0.2;

/// One sine-squared term `sin^2(k*pi*x + pi/d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SineTerm {
    /// Frequency multiple, a non-zero integer in `[-5, 5]`.
    pub k: i64,
    /// Phase divisor, an integer in `[1, 6]`.
    pub d: i64,
}

/// Desired-profile expression: one quadratic `a*x^2 + b*x` per direction plus
/// an optional sine-squared term per direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileExpression {
    /// `(a, b)` coefficients of the `x1` quadratic, integers in `[-5, 5]`.
    pub quad1: (i64, i64),
    /// `(a, b)` coefficients of the `x2` quadratic.
    pub quad2: (i64, i64),
    pub sin1: Option<SineTerm>,
    pub sin2: Option<SineTerm>,
}

impl ProfileExpression {
    /// Evaluate the profile at a point of the open unit square.
    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        let quad = |(a, b): (i64, i64), x: f64| a as f64 * x * x + b as f64 * x;
        let sine = |term: Option<SineTerm>, x: f64| match term {
            Some(SineTerm { k, d }) => {
                let s = (k as f64 * std::f64::consts::PI * x + std::f64::consts::PI / d as f64).sin();
                s * s
            }
            None => 0.0,
        };
        quad(self.quad1, x1) + quad(self.quad2, x2) + sine(self.sin1, x1) + sine(self.sin2, x2)
    }

    /// Whether the given direction (0 for `x1`, 1 for `x2`) has any term.
    fn direction_active(&self, direction: usize) -> bool {
        let (quad, sin) = if direction == 0 {
            (self.quad1, self.sin1)
        } else {
            (self.quad2, self.sin2)
        };
        quad != (0, 0) || sin.is_some()
    }
}

/// Sample the profile expression at every interior node.
pub fn eval_profile(expr: &ProfileExpression, grid: Grid) -> DomainField {
    DomainField::from_fn(grid, |x1, x2| expr.eval(x1, x2))
}

/// One boundary-control problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub id: u64,
    pub grid: Grid,
    pub alpha: f64,
    /// Constant sourcing term of the PDE.
    pub c: f64,
    pub expr: ProfileExpression,
    /// Desired interior profile, `eval_profile(expr, grid)` for generated
    /// problems.
    pub y_d: DomainField,
    /// Desired boundary data; all zero for generated problems.
    pub u_d: BoundaryValues,
    pub y_min: f64,
    pub y_max: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Problem {
    /// Rebuild a problem from its scalar description; `y_d` is recomputed
    /// from the expression and `u_d` is zero.
    pub fn from_parts(
        id: u64,
        n: usize,
        alpha: f64,
        c: f64,
        expr: ProfileExpression,
        y_min: f64,
        y_max: f64,
        u_min: f64,
        u_max: f64,
    ) -> Self {
        let grid = Grid::new(n);
        Problem {
            id,
            grid,
            alpha,
            c,
            expr,
            y_d: eval_profile(&expr, grid),
            u_d: BoundaryValues::zeros(grid),
            y_min,
            y_max,
            u_min,
            u_max,
        }
    }
}

/// Why a draw was discarded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RejectReason {
    /// Profile variation `max - min` below [`RANGE_FILTER`].
    Range { range: f64 },
    /// Reference per-cell cost above [`COST_FILTER`].
    Cost { cost: f64 },
}

/// Outcome of one generation index. Rejection is part of the sampling
/// process, not a failure.
#[derive(Debug, Clone, PartialEq)]
pub enum GenOutcome {
    Accepted(Problem),
    Rejected(RejectReason),
}

impl GenOutcome {
    pub fn accepted(self) -> Option<Problem> {
        match self {
            GenOutcome::Accepted(p) => Some(p),
            GenOutcome::Rejected(_) => None,
        }
    }
}

/// The profile variation filter: a desired profile is kept only when its
/// grid-sampled `max - min` reaches [`RANGE_FILTER`].
pub fn passes_range_filter(y_d: &DomainField) -> bool {
    y_d.max() - y_d.min() >= RANGE_FILTER
}

/// Draw the bound parameters from the profile statistics: `y_max` uniform
/// between the median and the maximum; `u_min`/`u_max` are the profile
/// minimum/maximum shifted by half a uniform draw from `(-range, range)`,
/// redrawn until `u_min < u_max`.
pub fn derive_bounds(y_d: &DomainField, rng: &mut impl Rng) -> (f64, f64, f64) {
    let mn = y_d.min();
    let mx = y_d.max();
    let med = y_d.median();
    let range = mx - mn;
    let y_max = if med < mx { rng.random_range(med..=mx) } else { mx };
    if range <= 0.0 {
        // Degenerate constant profile: the shift distribution collapses and
        // the redraw loop could never exit. Generation filters these out
        // before reaching here; widen by a fixed margin so the operation
        // stays total.
        return (y_max, mn - 0.5, mx + 0.5);
    }
    loop {
        let u_min = mn + 0.5 * rng.random_range(-range..range);
        let u_max = mx + 0.5 * rng.random_range(-range..range);
        if u_min < u_max {
            return (y_max, u_min, u_max);
        }
    }
}

fn draw_quad(rng: &mut impl Rng) -> (i64, i64) {
    (rng.random_range(-5i64..=5), rng.random_range(-5i64..=5))
}

fn draw_sine(rng: &mut impl Rng) -> Option<SineTerm> {
    if rng.random_bool(0.5) {
        // non-zero k uniform over the ten values of [-5, 5] \ {0}
        let j = rng.random_range(0i64..10);
        let k = if j < 5 { j - 5 } else { j - 4 };
        let d = rng.random_range(1i64..=6);
        Some(SineTerm { k, d })
    } else {
        None
    }
}

fn draw_expression(rng: &mut impl Rng) -> ProfileExpression {
    loop {
        let expr = ProfileExpression {
            quad1: draw_quad(rng),
            quad2: draw_quad(rng),
            sin1: draw_sine(rng),
            sin2: draw_sine(rng),
        };
        // require a genuinely two-dimensional profile: each direction must
        // contribute at least one term
        if expr.direction_active(0) && expr.direction_active(1) {
            return expr;
        }
    }
}

/// Generate the problem for one `(master_seed, index)` pair with the grid
/// size drawn from `n_range`. Each index gets its own RNG stream, so distinct
/// indices can be generated concurrently and in any order with identical
/// results. `ref_cost` supplies the per-cell reference cost for the cost
/// filter; its solver errors propagate.
pub fn generate_problem_in(
    master_seed: u64,
    index: u64,
    n_range: std::ops::RangeInclusive<usize>,
    ref_cost: &dyn Fn(&Problem) -> Result<f64>,
) -> Result<GenOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);

    let n = rng.random_range(n_range);
    let grid = Grid::new(n);
    let expr = draw_expression(&mut rng);
    let y_d = eval_profile(&expr, grid);

    if !passes_range_filter(&y_d) {
        let range = y_d.max() - y_d.min();
        return Ok(GenOutcome::Rejected(RejectReason::Range { range }));
    }

    let (y_max, u_min, u_max) = derive_bounds(&y_d, &mut rng);
    let c = SOURCING_TERMS[rng.random_range(0..SOURCING_TERMS.len())];

    let problem = Problem {
        id: index,
        grid,
        alpha: ALPHA,
        c,
        expr,
        y_d,
        u_d: BoundaryValues::zeros(grid),
        y_min: UNBOUNDED_BELOW,
        y_max,
        u_min,
        u_max,
    };

    let cost = ref_cost(&problem)?;
    if cost > COST_FILTER {
        return Ok(GenOutcome::Rejected(RejectReason::Cost { cost }));
    }
    Ok(GenOutcome::Accepted(problem))
}

/// [`generate_problem_in`] with the standard grid-size range `[10, 100]`.
pub fn generate_problem(
    master_seed: u64,
    index: u64,
    ref_cost: &dyn Fn(&Problem) -> Result<f64>,
) -> Result<GenOutcome> {
    generate_problem_in(master_seed, index, 10..=100, ref_cost)
}

const CSV_HEADER: &str = "id,n,alpha,c,qa1,qb1,qa2,qb2,s1k,s1d,s2k,s2d,y_min,y_max,u_min,u_max";

/// Serialize a real with 17 significant digits so the round trip through
/// text is byte-identical and value-exact.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn problem_row(p: &Problem) -> String {
    let (s1k, s1d) = p.sin_parts(0);
    let (s2k, s2d) = p.sin_parts(1);
    let mut row = String::new();
    let _ = write!(
        row,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        p.id,
        p.grid.n(),
        fmt_real(p.alpha),
        fmt_real(p.c),
        p.expr.quad1.0,
        p.expr.quad1.1,
        p.expr.quad2.0,
        p.expr.quad2.1,
        s1k,
        s1d,
        s2k,
        s2d,
        fmt_real(p.y_min),
        fmt_real(p.y_max),
        fmt_real(p.u_min),
        fmt_real(p.u_max),
    );
    row
}

impl Problem {
    fn sin_parts(&self, direction: usize) -> (i64, i64) {
        let term = if direction == 0 {
            self.expr.sin1
        } else {
            self.expr.sin2
        };
        match term {
            Some(SineTerm { k, d }) => (k, d),
            None => (0, 0),
        }
    }
}

/// Write a dataset as CSV. The desired profile is not stored; it is
/// recomputed from the expression on load.
pub fn save_dataset(problems: &[Problem], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(64 * (problems.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for p in problems {
        out.push_str(&problem_row(p));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(line: usize, name: &str, raw: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad {name} value {raw:?}"),
    })
}

fn parse_row(line: usize, row: &str) -> Result<Problem> {
    let fields: Vec<&str> = row.split(',').collect();
    if fields.len() != 16 {
        return Err(Error::Parse {
            line,
            message: format!("expected 16 fields, found {}", fields.len()),
        });
    }
    let id: u64 = parse_field(line, "id", fields[0])?;
    let n: usize = parse_field(line, "n", fields[1])?;
    if n == 0 {
        return Err(Error::Parse {
            line,
            message: "grid size must be at least 1".into(),
        });
    }
    let alpha: f64 = parse_field(line, "alpha", fields[2])?;
    let c: f64 = parse_field(line, "c", fields[3])?;
    let qa1: i64 = parse_field(line, "qa1", fields[4])?;
    let qb1: i64 = parse_field(line, "qb1", fields[5])?;
    let qa2: i64 = parse_field(line, "qa2", fields[6])?;
    let qb2: i64 = parse_field(line, "qb2", fields[7])?;
    let s1k: i64 = parse_field(line, "s1k", fields[8])?;
    let s1d: i64 = parse_field(line, "s1d", fields[9])?;
    let s2k: i64 = parse_field(line, "s2k", fields[10])?;
    let s2d: i64 = parse_field(line, "s2d", fields[11])?;
    let y_min: f64 = parse_field(line, "y_min", fields[12])?;
    let y_max: f64 = parse_field(line, "y_max", fields[13])?;
    let u_min: f64 = parse_field(line, "u_min", fields[14])?;
    let u_max: f64 = parse_field(line, "u_max", fields[15])?;
    let sine = |k: i64, d: i64| if k == 0 { None } else { Some(SineTerm { k, d }) };
    let expr = ProfileExpression {
        quad1: (qa1, qb1),
        quad2: (qa2, qb2),
        sin1: sine(s1k, s1d),
        sin2: sine(s2k, s2d),
    };
    Ok(Problem::from_parts(
        id, n, alpha, c, expr, y_min, y_max, u_min, u_max,
    ))
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Vec<Problem>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected header {header:?}"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    }
    let mut problems = Vec::new();
    for (idx, row) in lines {
        if row.is_empty() {
            continue;
        }
        problems.push(parse_row(idx + 1, row)?);
    }
    Ok(problems)
}
