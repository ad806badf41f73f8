//! Python bindings for the boundary-control toolkit.
//!
//! The module mirrors the Rust crate's main types and operations: problem
//! construction and generation, the Poisson solver, cost and gradient
//! evaluation, initial-guess strategies, hybrid optimization runs, and both
//! training loops. Boundary controls cross the language boundary in the
//! canonical ring order (top left-to-right, right top-to-bottom, bottom
//! right-to-left, left bottom-to-top), interior fields as `n` row lists of
//! `n` values.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use bctrl_core::checkpoint;
use bctrl_core::cost::{self, CostBreakdown, CostConfig};
use bctrl_core::grid::{as_ring, from_ring, BoundaryValues, Grid};
use bctrl_core::guess::{self, ConvStack2D, GuessStrategy};
use bctrl_core::harness;
use bctrl_core::hybrid::{self, HybridParams as CoreParams, PolicyTrainConfig};
use bctrl_core::poisson::{self, source_basis, DEFAULT_TOL};
use bctrl_core::problem::{
    self, Problem as CoreProblem, ProfileExpression, SineTerm, ALPHA, SOURCING_TERMS,
    UNBOUNDED_BELOW,
};

fn err(e: bctrl_core::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn sine_term(t: Option<(i64, i64)>, which: &str) -> PyResult<Option<SineTerm>> {
    match t {
        None => Ok(None),
        Some((0, _)) => Err(PyValueError::new_err(format!(
            "{which}: sine frequency must be non-zero"
        ))),
        Some((k, d)) if d >= 1 => Ok(Some(SineTerm { k, d })),
        Some(_) => Err(PyValueError::new_err(format!(
            "{which}: sine phase divisor must be at least 1"
        ))),
    }
}

fn ring_to_boundary(grid: Grid, ring: &[f64]) -> PyResult<BoundaryValues> {
    if ring.len() != grid.boundary_len() {
        return Err(PyValueError::new_err(format!(
            "boundary ring needs 4n = {} values, got {}",
            grid.boundary_len(),
            ring.len()
        )));
    }
    Ok(from_ring(grid, ring))
}

fn breakdown_dict<'py>(py: Python<'py>, b: &CostBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("f", b.f)?;
    d.set_item("f_o", b.f_o)?;
    d.set_item("f_v", b.f_v)?;
    d.set_item("max_violation", b.max_violation)?;
    d.set_item("mean_violation", b.mean_violation)?;
    d.set_item("violated_cells", b.violated_cells)?;
    Ok(d)
}

fn parse_strategy(name: &str, weights: Option<&GuessWeights>) -> PyResult<GuessStrategy> {
    let stack = || {
        weights.map(|w| w.inner.clone()).ok_or_else(|| {
            PyValueError::new_err(format!("the {name} guess needs weights"))
        })
    };
    match name {
        "mean" => Ok(GuessStrategy::Mean),
        "median" => Ok(GuessStrategy::Median),
        "edge" => Ok(GuessStrategy::Edge),
        "informed" => Ok(GuessStrategy::Informed(stack()?)),
        "hybrid" => Ok(GuessStrategy::Hybrid(stack()?)),
        other => Err(PyValueError::new_err(format!(
            "unknown guess strategy {other:?} (expected mean, median, edge, informed or hybrid)"
        ))),
    }
}

fn inner_problems(problems: &[PyRef<'_, Problem>]) -> Vec<CoreProblem> {
    problems.iter().map(|p| p.inner.clone()).collect()
}

/// A control problem instance: grid size, sourcing term, desired profile
/// expression and the box constraints.
#[pyclass]
struct Problem {
    inner: CoreProblem,
}

#[pymethods]
impl Problem {
    /// Build a problem from its scalar description. The desired interior
    /// profile is the quadratic-plus-sine-squared expression evaluated on
    /// the grid; the desired boundary data is zero and the state is
    /// unbounded below.
    #[new]
    #[pyo3(signature = (n, c, y_max, u_min, u_max, quad1=(0, 0), quad2=(0, 0),
                        sin1=None, sin2=None, alpha=ALPHA, id=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n: usize,
        c: f64,
        y_max: f64,
        u_min: f64,
        u_max: f64,
        quad1: (i64, i64),
        quad2: (i64, i64),
        sin1: Option<(i64, i64)>,
        sin2: Option<(i64, i64)>,
        alpha: f64,
        id: u64,
    ) -> PyResult<Self> {
        if n == 0 {
            return Err(PyValueError::new_err("n must be positive"));
        }
        if !(u_min < u_max) {
            return Err(PyValueError::new_err("u_min must be below u_max"));
        }
        let expr = ProfileExpression {
            quad1,
            quad2,
            sin1: sine_term(sin1, "sin1")?,
            sin2: sine_term(sin2, "sin2")?,
        };
        Ok(Problem {
            inner: CoreProblem::from_parts(
                id,
                n,
                alpha,
                c,
                expr,
                UNBOUNDED_BELOW,
                y_max,
                u_min,
                u_max,
            ),
        })
    }

    #[getter]
    fn id(&self) -> u64 {
        self.inner.id
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.grid.n()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn c(&self) -> f64 {
        self.inner.c
    }

    #[getter]
    fn y_min(&self) -> f64 {
        self.inner.y_min
    }

    #[getter]
    fn y_max(&self) -> f64 {
        self.inner.y_max
    }

    #[getter]
    fn u_min(&self) -> f64 {
        self.inner.u_min
    }

    #[getter]
    fn u_max(&self) -> f64 {
        self.inner.u_max
    }

    /// Desired interior profile as `n` rows of `n` values.
    fn desired_profile(&self) -> Vec<Vec<f64>> {
        let n = self.inner.grid.n();
        self.inner
            .y_d
            .values()
            .chunks(n)
            .map(<[f64]>::to_vec)
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem(id={}, n={}, c={}, y_max={}, u_min={}, u_max={})",
            self.inner.id,
            self.inner.grid.n(),
            self.inner.c,
            self.inner.y_max,
            self.inner.u_min,
            self.inner.u_max
        )
    }
}

/// Learnable parameters of the hybrid optimizer: three learning rates, the
/// spatio-temporal network, and the exploration noise scale.
#[pyclass]
struct HybridParams {
    inner: CoreParams,
}

#[pymethods]
impl HybridParams {
    /// The learned learning rates with a zero network.
    #[staticmethod]
    fn learned_default() -> Self {
        HybridParams {
            inner: CoreParams::learned_default(),
        }
    }

    /// Randomly initialized network, deterministic in the seed.
    #[staticmethod]
    fn seeded(seed: u64) -> Self {
        HybridParams {
            inner: CoreParams::seeded(seed),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(HybridParams {
            inner: checkpoint::load_hybrid_params(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_hybrid_params(&path, &self.inner).map_err(err)
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// All parameters as one flat list (the training parameterization).
    fn flatten(&self) -> Vec<f64> {
        self.inner.flatten()
    }

    #[getter]
    fn eta_adam(&self) -> f64 {
        self.inner.eta_adam
    }

    #[getter]
    fn eta_rms(&self) -> f64 {
        self.inner.eta_rms
    }

    #[getter]
    fn eta_net(&self) -> f64 {
        self.inner.eta_net
    }

    #[getter]
    fn exploration_log_std(&self) -> f64 {
        self.inner.exploration_log_std
    }

    fn __repr__(&self) -> String {
        format!(
            "HybridParams(eta_adam={}, eta_rms={}, eta_net={}, {} parameters)",
            self.inner.eta_adam,
            self.inner.eta_rms,
            self.inner.eta_net,
            self.inner.param_count()
        )
    }
}

/// Weights of the informed-guess convolutional stack.
#[pyclass]
struct GuessWeights {
    inner: ConvStack2D,
}

#[pymethods]
impl GuessWeights {
    #[staticmethod]
    fn zeros() -> Self {
        GuessWeights {
            inner: ConvStack2D::zeros(),
        }
    }

    /// Identity-like initialization plus seeded noise; the untrained stack
    /// already produces a sensible guess.
    #[staticmethod]
    #[pyo3(signature = (seed=0, noise=0.05))]
    fn near_identity(seed: u64, noise: f64) -> Self {
        GuessWeights {
            inner: ConvStack2D::near_identity(seed, noise),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(GuessWeights {
            inner: checkpoint::load_guess_weights(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_guess_weights(&path, &self.inner).map_err(err)
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn __repr__(&self) -> String {
        format!("GuessWeights({} parameters)", self.inner.param_count())
    }
}

/// Solve the Poisson problem `lap y = c` with Dirichlet edges (each a list
/// of `n` values, corners excluded). Returns the interior as `n` row lists.
#[pyfunction]
#[pyo3(signature = (n, top, bottom, left, right, c, tol=DEFAULT_TOL))]
fn solve_poisson(
    n: usize,
    top: Vec<f64>,
    bottom: Vec<f64>,
    left: Vec<f64>,
    right: Vec<f64>,
    c: f64,
    tol: f64,
) -> PyResult<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(PyValueError::new_err("n must be positive"));
    }
    for (name, edge) in [("top", &top), ("bottom", &bottom), ("left", &left), ("right", &right)] {
        if edge.len() != n {
            return Err(PyValueError::new_err(format!(
                "edge {name} needs exactly {n} values, got {}",
                edge.len()
            )));
        }
    }
    let grid = Grid::new(n);
    let b = BoundaryValues::new(grid, top, bottom, left, right);
    let y = poisson::solve_poisson(grid, &b, c, tol).map_err(err)?;
    Ok(y.values().chunks(n).map(<[f64]>::to_vec).collect())
}

/// Total cost and its decomposition for a control given in ring order.
#[pyfunction]
fn evaluate_cost<'py>(
    py: Python<'py>,
    problem: &Problem,
    u: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let b = ring_to_boundary(problem.inner.grid, &u)?;
    let cfg = CostConfig::for_grid(problem.inner.grid);
    let breakdown = cost::evaluate(&problem.inner, &b, &cfg).map_err(err)?;
    breakdown_dict(py, &breakdown)
}

/// Cost breakdown plus the adjoint gradient (ring order) of a control.
#[pyfunction]
fn cost_gradient<'py>(
    py: Python<'py>,
    problem: &Problem,
    u: Vec<f64>,
) -> PyResult<(Bound<'py, PyDict>, Vec<f64>)> {
    let b = ring_to_boundary(problem.inner.grid, &u)?;
    let cfg = CostConfig::for_grid(problem.inner.grid);
    let (breakdown, grad) = cost::evaluate_with_gradient(&problem.inner, &b, &cfg).map_err(err)?;
    Ok((breakdown_dict(py, &breakdown)?, as_ring(&grad)))
}

/// Initial control for a problem under a named strategy, in ring order.
#[pyfunction]
#[pyo3(signature = (problem, strategy="mean", weights=None))]
fn initial_guess(
    problem: &Problem,
    strategy: &str,
    weights: Option<&GuessWeights>,
) -> PyResult<Vec<f64>> {
    let strategy = parse_strategy(strategy, weights)?;
    let basis = source_basis(problem.inner.grid).map_err(err)?;
    let u = guess::guess(&strategy, &problem.inner, &basis).map_err(err)?;
    Ok(as_ring(&u))
}

/// Run the hybrid optimizer for `iters` updates from a fresh state. Returns
/// the cost trace (entry 0 is the initial guess), the best control and the
/// per-iteration component contributions.
#[pyfunction]
#[pyo3(signature = (problem, params, iters=32, strategy="mean", weights=None))]
fn run_hybrid<'py>(
    py: Python<'py>,
    problem: &Problem,
    params: &HybridParams,
    iters: usize,
    strategy: &str,
    weights: Option<&GuessWeights>,
) -> PyResult<Bound<'py, PyDict>> {
    if iters == 0 {
        return Err(PyValueError::new_err("iters must be at least 1"));
    }
    let strategy = parse_strategy(strategy, weights)?;
    let cfg = CostConfig::for_grid(problem.inner.grid);
    let run = hybrid::run(&problem.inner, &params.inner, &strategy, iters, &cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("trace", run.trace.iter().map(|b| b.f).collect::<Vec<_>>())?;
    d.set_item("best_cost", run.best_cost)?;
    d.set_item("best_iteration", run.best_iteration)?;
    d.set_item("best_u", as_ring(&run.best_u))?;
    d.set_item(
        "contributions",
        run.contributions
            .iter()
            .map(|c| (c.adam, c.rms, c.net))
            .collect::<Vec<_>>(),
    )?;
    d.set_item("aborted", run.aborted.clone())?;
    Ok(d)
}

/// Generate `count` problems from a master seed (deterministic, filtered).
#[pyfunction]
#[pyo3(signature = (seed, count, workers=0))]
fn generate_problems(seed: u64, count: usize, workers: usize) -> PyResult<Vec<Problem>> {
    let report = harness::generate_dataset(seed, count, workers).map_err(err)?;
    Ok(report
        .problems
        .into_iter()
        .map(|inner| Problem { inner })
        .collect())
}

#[pyfunction]
fn load_problems(path: PathBuf) -> PyResult<Vec<Problem>> {
    Ok(problem::load_dataset(&path)
        .map_err(err)?
        .into_iter()
        .map(|inner| Problem { inner })
        .collect())
}

#[pyfunction]
fn save_problems(problems: Vec<PyRef<'_, Problem>>, path: PathBuf) -> PyResult<()> {
    problem::save_dataset(&inner_problems(&problems), &path).map_err(err)
}

/// Evaluate guess strategies over problems: mean, median and edge always,
/// plus informed and hybrid when weights are given. Returns strategy names,
/// problem ids and the cost matrix (one row per problem).
#[pyfunction]
#[pyo3(signature = (problems, weights=None, workers=0))]
fn eval_guesses<'py>(
    py: Python<'py>,
    problems: Vec<PyRef<'_, Problem>>,
    weights: Option<&GuessWeights>,
    workers: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let inner = inner_problems(&problems);
    let eval = harness::eval_guesses(&inner, weights.map(|w| &w.inner), workers).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("strategies", eval.strategies.clone())?;
    d.set_item("ids", eval.rows.iter().map(|r| r.id).collect::<Vec<_>>())?;
    d.set_item(
        "costs",
        eval.rows.iter().map(|r| r.costs.clone()).collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// Train the informed-guess network (80:10:10 split in input order).
/// Returns the best-validation weights and the validation cost per epoch.
#[pyfunction]
#[pyo3(signature = (problems, epochs=40, lr=0.05, seed=0))]
fn train_informed_guess(
    problems: Vec<PyRef<'_, Problem>>,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> PyResult<(GuessWeights, Vec<f64>)> {
    if problems.len() < 3 {
        return Err(PyValueError::new_err(
            "training needs at least 3 problems (train/val/test split)",
        ));
    }
    let inner = inner_problems(&problems);
    let (train, val, _) = harness::split_dataset(&inner);
    let init = ConvStack2D::near_identity(seed, 0.05);
    let report = guess::train_informed(&init, train, val, epochs, lr).map_err(err)?;
    Ok((GuessWeights { inner: report.stack }, report.val_costs))
}

/// Train the hybrid optimizer by policy gradient (80:10:10 split). Returns
/// the best-validation parameters and the validation cost per checkpoint.
#[pyfunction]
#[pyo3(signature = (problems, episodes=200, seed=0, params=None, final_cost_return=false))]
fn train_optimizer(
    problems: Vec<PyRef<'_, Problem>>,
    episodes: usize,
    seed: u64,
    params: Option<&HybridParams>,
    final_cost_return: bool,
) -> PyResult<(HybridParams, Vec<f64>)> {
    if problems.len() < 3 {
        return Err(PyValueError::new_err(
            "training needs at least 3 problems (train/val/test split)",
        ));
    }
    let inner = inner_problems(&problems);
    let (train, val, _) = harness::split_dataset(&inner);
    let params0 = match params {
        Some(p) => p.inner.clone(),
        None => CoreParams::seeded(seed),
    };
    let tcfg = PolicyTrainConfig {
        episodes,
        seed,
        final_cost_return,
        ..PolicyTrainConfig::default()
    };
    let report = hybrid::train_policy_gradient(&params0, train, val, &tcfg).map_err(err)?;
    Ok((HybridParams { inner: report.params }, report.val_costs))
}

#[pymodule]
fn bctrl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_class::<HybridParams>()?;
    m.add_class::<GuessWeights>()?;
    m.add_function(wrap_pyfunction!(solve_poisson, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_cost, m)?)?;
    m.add_function(wrap_pyfunction!(cost_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(initial_guess, m)?)?;
    m.add_function(wrap_pyfunction!(run_hybrid, m)?)?;
    m.add_function(wrap_pyfunction!(generate_problems, m)?)?;
    m.add_function(wrap_pyfunction!(load_problems, m)?)?;
    m.add_function(wrap_pyfunction!(save_problems, m)?)?;
    m.add_function(wrap_pyfunction!(eval_guesses, m)?)?;
    m.add_function(wrap_pyfunction!(train_informed_guess, m)?)?;
    m.add_function(wrap_pyfunction!(train_optimizer, m)?)?;
    m.add("ALPHA", ALPHA)?;
    m.add("SOURCING_TERMS", SOURCING_TERMS.to_vec())?;
    Ok(())
}
