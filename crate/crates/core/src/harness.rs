//! Benchmark harness: dataset generation at scale, guess evaluation,
//! optimization runs with trace emission, comparison against imported
//! reference-solver results, and FLOP/wall-time accounting.
//!
//! Everything here is deterministic given the seed and the inputs (with
//! exploration disabled), and the per-problem work parallelizes over a
//! worker pool with output ordered by problem id regardless of completion
//! order. Reference results are imported from CSV — this crate never invokes
//! an external solver.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::cost::{self, CostConfig};
use crate::error::{Error, Result};
use crate::flops::{self, FlopCounts};
use crate::grid::Grid;
use crate::guess::{guess, ConvStack2D, GuessStrategy};
use crate::hybrid::{self, HybridParams, HybridRun};
use crate::optimizers;
use crate::poisson::source_basis;
use crate::problem::{
    eval_profile, fmt_real, generate_problem_in, GenOutcome, Problem, ProfileExpression,
    RejectReason, SineTerm, UNBOUNDED_BELOW,
};

/// Relative difference below which our cost and the reference cost count as
/// a tie rather than a win or loss.
pub const TIE_RELATIVE_TOLERANCE: f64 = 1e-9;

/// Build a rayon pool with `workers` threads (0 = rayon's default).
fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invalid(format!("worker pool: {e}")))
}

// ---------------------------------------------------------------------------
// dataset generation
// ---------------------------------------------------------------------------

/// Outcome of a dataset generation scan.
#[derive(Debug, Clone)]
pub struct GenerateReport {
    pub problems: Vec<Problem>,
    /// Indices scanned (accepted + rejected).
    pub scanned: u64,
    pub rejected_range: u64,
    pub rejected_cost: u64,
}

/// Scan generator indices `0..` in order and keep the first `count` accepted
/// problems. Index batches run in parallel; acceptance order is index order,
/// so the result is independent of the worker count.
pub fn generate_dataset(seed: u64, count: usize, workers: usize) -> Result<GenerateReport> {
    generate_dataset_in(seed, count, 10..=100, workers)
}

/// [`generate_dataset`] with the grid-size range pinned, for desk-scale
/// experiments that cap the problem size.
pub fn generate_dataset_in(
    seed: u64,
    count: usize,
    n_range: std::ops::RangeInclusive<usize>,
    workers: usize,
) -> Result<GenerateReport> {
    let pool = pool(workers)?;
    let batch = pool.current_num_threads().max(1) * 4;
    let mut report = GenerateReport {
        problems: Vec::with_capacity(count),
        scanned: 0,
        rejected_range: 0,
        rejected_cost: 0,
    };
    let mut next_index = 0u64;
    while report.problems.len() < count {
        let indices: Vec<u64> = (next_index..next_index + batch as u64).collect();
        next_index += batch as u64;
        let outcomes: Vec<Result<GenOutcome>> = pool.install(|| {
            indices
                .par_iter()
                .map(|&i| {
                    generate_problem_in(seed, i, n_range.clone(), &optimizers::reference_cost)
                })
                .collect()
        });
        for outcome in outcomes {
            report.scanned += 1;
            match outcome? {
                GenOutcome::Accepted(p) => {
                    if report.problems.len() < count {
                        report.problems.push(p);
                    }
                }
                GenOutcome::Rejected(RejectReason::Range { .. }) => report.rejected_range += 1,
                GenOutcome::Rejected(RejectReason::Cost { .. }) => report.rejected_cost += 1,
            }
            if report.problems.len() == count {
                break;
            }
        }
    }
    // trim the over-scanned tail so `scanned` counts up to the last accept
    Ok(report)
}

/// Deterministic 80:10:10 split in dataset order.
pub fn split_dataset(problems: &[Problem]) -> (&[Problem], &[Problem], &[Problem]) {
    assert!(problems.len() >= 3, "a split needs at least three problems");
    let val = (problems.len() / 10).max(1);
    let test = (problems.len() / 10).max(1);
    let train = problems.len() - val - test;
    let (a, rest) = problems.split_at(train);
    let (b, c) = rest.split_at(val);
    (a, b, c)
}

// ---------------------------------------------------------------------------
// reference records and comparison
// ---------------------------------------------------------------------------

/// One imported reference-solver result.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRecord {
    pub id: u64,
    pub cost: f64,
    pub feasible: bool,
    pub iterations: u64,
}

const REFERENCE_HEADER: &str = "id,cost,feasible,iterations";

/// Write reference records (used for fixtures; references normally arrive
/// from outside).
pub fn save_reference(records: &[ReferenceRecord], path: &Path) -> Result<()> {
    let mut out = String::from(REFERENCE_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{}",
            r.id,
            fmt_real(r.cost),
            u8::from(r.feasible),
            r.iterations
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load reference records from the documented CSV contract.
pub fn load_reference(path: &Path) -> Result<Vec<ReferenceRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == REFERENCE_HEADER => {}
        other => {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected header {REFERENCE_HEADER:?}, found {:?}",
                    other.map(|(_, l)| l).unwrap_or("")
                ),
            })
        }
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let parse = |field: &str, what: &str| -> Result<f64> {
            field.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad {what}: {field:?}"),
            })
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let feasible = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("feasible must be 0 or 1, found {other:?}"),
                })
            }
        };
        records.push(ReferenceRecord {
            id: parse(fields[0], "id")? as u64,
            cost: parse(fields[1], "cost")?,
            feasible,
            iterations: parse(fields[3], "iterations")? as u64,
        });
    }
    Ok(records)
}

/// Win/loss/tie tallies against a reference, restricted to feasible
/// reference rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareSummary {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Denominator: reference rows marked feasible.
    pub feasible: usize,
    pub infeasible_excluded: usize,
    /// Wins over feasible, in percent.
    pub win_rate: f64,
}

/// Compare per-problem costs against reference records. Every id must appear
/// on both sides; a mismatch lists the offenders. A win is a cost strictly
/// below a feasible reference; costs within [`TIE_RELATIVE_TOLERANCE`]
/// relative difference are ties.
pub fn compare(results: &[(u64, f64)], reference: &[ReferenceRecord]) -> Result<CompareSummary> {
    if results.is_empty() {
        return Err(Error::Invalid("nothing to compare".into()));
    }
    let by_id: std::collections::HashMap<u64, &ReferenceRecord> =
        reference.iter().map(|r| (r.id, r)).collect();
    let missing: Vec<u64> = results
        .iter()
        .map(|(id, _)| *id)
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let ours: std::collections::HashSet<u64> = results.iter().map(|(id, _)| *id).collect();
    let extra: Vec<u64> = reference
        .iter()
        .map(|r| r.id)
        .filter(|id| !ours.contains(id))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Invalid(format!(
            "id mismatch: results without reference {missing:?}, reference without results {extra:?}"
        )));
    }

    let mut summary = CompareSummary {
        wins: 0,
        losses: 0,
        ties: 0,
        feasible: 0,
        infeasible_excluded: 0,
        win_rate: 0.0,
    };
    for (id, cost) in results {
        let r = by_id[id];
        if !r.feasible {
            summary.infeasible_excluded += 1;
            continue;
        }
        summary.feasible += 1;
        let rel = (cost - r.cost).abs() / cost.abs().max(r.cost.abs()).max(f64::MIN_POSITIVE);
        if rel < TIE_RELATIVE_TOLERANCE {
            summary.ties += 1;
        } else if cost < &r.cost {
            summary.wins += 1;
        } else {
            summary.losses += 1;
        }
    }
    if summary.feasible == 0 {
        return Err(Error::Invalid(
            "no feasible reference rows to compare against".into(),
        ));
    }
    summary.win_rate = 100.0 * summary.wins as f64 / summary.feasible as f64;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// traces
// ---------------------------------------------------------------------------

/// One row of an optimization trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub f: f64,
    pub f_o: f64,
    pub f_v: f64,
    pub adam_contrib: f64,
    pub rms_contrib: f64,
    pub net_contrib: f64,
}

const TRACE_HEADER: &str = "iter,f,f_o,f_v,adam_contrib,rms_contrib,net_contrib";

/// Trace rows of a hybrid run. The contribution columns describe the update
/// applied at that iteration; the final row (no further update) carries
/// zeros.
pub fn trace_rows(run: &HybridRun) -> Vec<TraceRow> {
    run.trace
        .iter()
        .enumerate()
        .map(|(iter, b)| {
            let contrib = run.contributions.get(iter);
            TraceRow {
                iter,
                f: b.f,
                f_o: b.f_o,
                f_v: b.f_v,
                adam_contrib: contrib.map_or(0.0, |c| c.adam),
                rms_contrib: contrib.map_or(0.0, |c| c.rms),
                net_contrib: contrib.map_or(0.0, |c| c.net),
            }
        })
        .collect()
}

pub fn save_trace(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iter,
            fmt_real(r.f),
            fmt_real(r.f_o),
            fmt_real(r.f_v),
            fmt_real(r.adam_contrib),
            fmt_real(r.rms_contrib),
            fmt_real(r.net_contrib)
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == TRACE_HEADER => {}
        other => {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected header {TRACE_HEADER:?}, found {:?}",
                    other.map(|(_, l)| l).unwrap_or("")
                ),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let num = |k: usize| -> Result<f64> {
            fields[k].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad number {:?}", fields[k]),
            })
        };
        rows.push(TraceRow {
            iter: num(0)? as usize,
            f: num(1)?,
            f_o: num(2)?,
            f_v: num(3)?,
            adam_contrib: num(4)?,
            rms_contrib: num(5)?,
            net_contrib: num(6)?,
        });
    }
    Ok(rows)
}

/// Cost statistics derivable from a trace alone; the report fields built
/// from these are therefore reproducible from stored trace files.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDerived {
    pub initial_f: f64,
    pub best_f: f64,
    pub best_iteration: usize,
    pub final_f: f64,
    pub best_f_o: f64,
    pub best_f_v: f64,
    pub iterations_run: usize,
}

/// Derive the report statistics from trace rows.
pub fn derive_from_trace(rows: &[TraceRow]) -> Result<TraceDerived> {
    if rows.is_empty() {
        return Err(Error::Invalid("empty trace".into()));
    }
    let mut best = 0usize;
    for (k, r) in rows.iter().enumerate() {
        if r.f < rows[best].f {
            best = k;
        }
    }
    Ok(TraceDerived {
        initial_f: rows[0].f,
        best_f: rows[best].f,
        best_iteration: rows[best].iter,
        final_f: rows[rows.len() - 1].f,
        best_f_o: rows[best].f_o,
        best_f_v: rows[best].f_v,
        iterations_run: rows.len() - 1,
    })
}

// ---------------------------------------------------------------------------
// optimization runs
// ---------------------------------------------------------------------------

/// Per-problem record of an optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub id: u64,
    pub n: usize,
    pub c: f64,
    pub derived: TraceDerived,
    pub aborted: bool,
    /// First trace iteration whose cost is strictly below the feasible
    /// reference cost, when a reference was supplied.
    pub first_beat: Option<usize>,
    pub wall_seconds: f64,
}

/// Whole-run output: per-problem reports plus global counters.
#[derive(Debug, Clone)]
pub struct OptimizeOutput {
    pub reports: Vec<RunReport>,
    pub flops: FlopCounts,
    pub wall_seconds: f64,
}

/// Run the hybrid optimizer over a dataset. Per-problem solver failures are
/// recorded (`aborted`) and the run continues; traces are written to
/// `trace_dir` when given. Output order is dataset order independent of the
/// worker count.
pub fn optimize_dataset(
    problems: &[Problem],
    params: &HybridParams,
    strategy: &GuessStrategy,
    iters: usize,
    reference: Option<&[ReferenceRecord]>,
    trace_dir: Option<&Path>,
    workers: usize,
) -> Result<OptimizeOutput> {
    let pool = pool(workers)?;
    let ref_by_id: std::collections::HashMap<u64, &ReferenceRecord> = reference
        .unwrap_or(&[])
        .iter()
        .map(|r| (r.id, r))
        .collect();
    let before = flops::snapshot();
    let start = Instant::now();

    let results: Vec<Result<(RunReport, Vec<TraceRow>)>> = pool.install(|| {
        problems
            .par_iter()
            .map(|p| {
                let t0 = Instant::now();
                let cfg = CostConfig::for_grid(p.grid);
                let run = hybrid::run(p, params, strategy, iters, &cfg)?;
                let rows = trace_rows(&run);
                let derived = derive_from_trace(&rows)?;
                let first_beat = ref_by_id.get(&p.id).and_then(|r| {
                    if !r.feasible {
                        return None;
                    }
                    rows.iter().find(|row| row.f < r.cost).map(|row| row.iter)
                });
                Ok((
                    RunReport {
                        id: p.id,
                        n: p.grid.n(),
                        c: p.c,
                        derived,
                        aborted: run.aborted.is_some(),
                        first_beat,
                        wall_seconds: t0.elapsed().as_secs_f64(),
                    },
                    rows,
                ))
            })
            .collect()
    });

    let mut reports = Vec::with_capacity(problems.len());
    for result in results {
        let (report, rows) = result?;
        if let Some(dir) = trace_dir {
            save_trace(&rows, &dir.join(format!("trace_{:06}.csv", report.id)))?;
        }
        reports.push(report);
    }
    Ok(OptimizeOutput {
        reports,
        flops: flops::snapshot().since(&before),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

const REPORT_HEADER: &str = "id,n,c,initial_f,best_f,best_iteration,final_f,best_f_o,best_f_v,\
                             iterations_run,aborted,first_beat,wall_seconds";

pub fn save_report(reports: &[RunReport], path: &Path) -> Result<()> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.id,
            r.n,
            fmt_real(r.c),
            fmt_real(r.derived.initial_f),
            fmt_real(r.derived.best_f),
            r.derived.best_iteration,
            fmt_real(r.derived.final_f),
            fmt_real(r.derived.best_f_o),
            fmt_real(r.derived.best_f_v),
            r.derived.iterations_run,
            u8::from(r.aborted),
            r.first_beat.map(|b| b.to_string()).unwrap_or_default(),
            fmt_real(r.wall_seconds)
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<Vec<RunReport>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == REPORT_HEADER => {}
        other => {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected header {REPORT_HEADER:?}, found {:?}",
                    other.map(|(_, l)| l).unwrap_or("")
                ),
            })
        }
    }
    let mut reports = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 13 fields, found {}", fields.len()),
            });
        }
        let num = |k: usize| -> Result<f64> {
            fields[k].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad number {:?}", fields[k]),
            })
        };
        reports.push(RunReport {
            id: num(0)? as u64,
            n: num(1)? as usize,
            c: num(2)?,
            derived: TraceDerived {
                initial_f: num(3)?,
                best_f: num(4)?,
                best_iteration: num(5)? as usize,
                final_f: num(6)?,
                best_f_o: num(7)?,
                best_f_v: num(8)?,
                iterations_run: num(9)? as usize,
            },
            aborted: fields[10] == "1",
            first_beat: if fields[11].is_empty() {
                None
            } else {
                Some(num(11)? as usize)
            },
            wall_seconds: num(12)?,
        });
    }
    Ok(reports)
}

/// Table-1-style cost summary over the non-aborted problems of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSummary {
    pub problems: usize,
    pub aborted: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Problems whose best cost improved strictly on the initial cost.
    pub improved: usize,
}

pub fn summarize(reports: &[RunReport]) -> CostSummary {
    let mut costs: Vec<f64> = reports
        .iter()
        .filter(|r| !r.aborted)
        .map(|r| r.derived.best_f)
        .collect();
    costs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let aborted = reports.len() - costs.len();
    let improved = reports
        .iter()
        .filter(|r| !r.aborted && r.derived.best_f < r.derived.initial_f)
        .count();
    if costs.is_empty() {
        return CostSummary {
            problems: reports.len(),
            aborted,
            mean: f64::NAN,
            median: f64::NAN,
            min: f64::NAN,
            max: f64::NAN,
            improved,
        };
    }
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    let median = if costs.len() % 2 == 1 {
        costs[costs.len() / 2]
    } else {
        0.5 * (costs[costs.len() / 2 - 1] + costs[costs.len() / 2])
    };
    CostSummary {
        problems: reports.len(),
        aborted,
        mean,
        median,
        min: costs[0],
        max: costs[costs.len() - 1],
        improved,
    }
}

/// Histogram of a sequence of iteration indices: `(iteration, count)` pairs
/// for every index that occurs, ascending.
pub fn iteration_histogram(values: impl Iterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut counts = std::collections::BTreeMap::new();
    for v in values {
        *counts.entry(v).or_insert(0usize) += 1;
    }
    counts.into_iter().collect()
}

// ---------------------------------------------------------------------------
// guess evaluation
// ---------------------------------------------------------------------------

/// Per-problem guess costs; `costs` aligns with the run's strategy list.
#[derive(Debug, Clone)]
pub struct GuessRow {
    pub id: u64,
    pub n: usize,
    pub c: f64,
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GuessEval {
    /// Strategy names, in column order.
    pub strategies: Vec<String>,
    pub rows: Vec<GuessRow>,
}

/// Evaluate guess strategies over a dataset: mean, median and edge always,
/// plus informed and hybrid when weights are supplied.
pub fn eval_guesses(
    problems: &[Problem],
    weights: Option<&ConvStack2D>,
    workers: usize,
) -> Result<GuessEval> {
    let pool = pool(workers)?;
    let mut strategies = vec![
        GuessStrategy::Mean,
        GuessStrategy::Median,
        GuessStrategy::Edge,
    ];
    if let Some(stack) = weights {
        strategies.push(GuessStrategy::Informed(stack.clone()));
        strategies.push(GuessStrategy::Hybrid(stack.clone()));
    }
    let rows: Vec<Result<GuessRow>> = pool.install(|| {
        problems
            .par_iter()
            .map(|p| {
                let cfg = CostConfig::for_grid(p.grid);
                let basis = source_basis(p.grid)?;
                let costs = strategies
                    .iter()
                    .map(|s| {
                        let u = guess(s, p, &basis)?;
                        Ok(cost::evaluate(p, &u, &cfg)?.f)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(GuessRow {
                    id: p.id,
                    n: p.grid.n(),
                    c: p.c,
                    costs,
                })
            })
            .collect()
    });
    Ok(GuessEval {
        strategies: strategies.iter().map(|s| s.name().to_string()).collect(),
        rows: rows.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Cumulative histogram of guess costs: for each threshold, how many
/// problems' cost is at or below it, per strategy. Thresholds step 0.05 from
/// 0 to 2.
pub fn cumulative_histogram(eval: &GuessEval) -> Vec<(f64, Vec<usize>)> {
    (0..=40)
        .map(|k| {
            let threshold = 0.05 * k as f64;
            let counts = (0..eval.strategies.len())
                .map(|s| {
                    eval.rows
                        .iter()
                        .filter(|r| r.costs[s] <= threshold)
                        .count()
                })
                .collect();
            (threshold, counts)
        })
        .collect()
}

/// Informed-vs-edge win tally grouped by sourcing term.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcingWins {
    pub c: f64,
    pub problems: usize,
    pub informed_wins: usize,
    pub edge_wins: usize,
    pub ties: usize,
}

/// Group the informed-vs-edge comparison by sourcing term. Requires the
/// informed column (weights were supplied).
pub fn wins_by_sourcing(eval: &GuessEval) -> Result<Vec<SourcingWins>> {
    let edge = eval
        .strategies
        .iter()
        .position(|s| s == "edge")
        .ok_or_else(|| Error::Invalid("no edge column".into()))?;
    let informed = eval
        .strategies
        .iter()
        .position(|s| s == "informed")
        .ok_or_else(|| Error::Invalid("no informed column (weights not supplied)".into()))?;
    let mut groups: std::collections::BTreeMap<u64, SourcingWins> = Default::default();
    for row in &eval.rows {
        let entry = groups.entry(row.c.to_bits()).or_insert(SourcingWins {
            c: row.c,
            problems: 0,
            informed_wins: 0,
            edge_wins: 0,
            ties: 0,
        });
        entry.problems += 1;
        let (i, e) = (row.costs[informed], row.costs[edge]);
        let rel = (i - e).abs() / i.abs().max(e.abs()).max(f64::MIN_POSITIVE);
        if rel < TIE_RELATIVE_TOLERANCE {
            entry.ties += 1;
        } else if i < e {
            entry.informed_wins += 1;
        } else {
            entry.edge_wins += 1;
        }
    }
    let mut rows: Vec<SourcingWins> = groups.into_values().collect();
    rows.sort_by(|a, b| a.c.partial_cmp(&b.c).unwrap());
    Ok(rows)
}

// ---------------------------------------------------------------------------
// FLOP and wall-time accounting
// ---------------------------------------------------------------------------

/// Counter deltas and wall time of one per-size instrument run.
#[derive(Debug, Clone)]
pub struct FlopsRow {
    pub n: usize,
    pub solver: u64,
    pub cost: u64,
    pub guess: u64,
    pub optimizer: u64,
    pub total: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub rows: Vec<FlopsRow>,
    /// Log-log least-squares slope of total FLOPs vs n.
    pub slope: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
}

/// Least-squares line through `(x, y)` pairs; returns (slope, intercept,
/// RMS residual).
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "a fit needs at least two points");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    (slope, intercept, (rss / n).sqrt())
}

/// Fixed synthetic instance used for FLOP instrumentation at a given size:
/// a smooth two-direction profile with loose bounds and a non-zero source.
pub fn instrument_problem(n: usize) -> Problem {
    let grid = Grid::new(n);
    let expr = ProfileExpression {
        quad1: (2, -1),
        quad2: (1, 1),
        sin1: Some(SineTerm { k: 2, d: 3 }),
        sin2: None,
    };
    let y_d = eval_profile(&expr, grid);
    let (mn, mx) = (y_d.min(), y_d.max());
    Problem {
        id: n as u64,
        grid,
        alpha: crate::problem::ALPHA,
        c: -20.0,
        expr,
        y_d,
        u_d: crate::grid::BoundaryValues::zeros(grid),
        y_min: UNBOUNDED_BELOW,
        y_max: mx,
        u_min: mn - 0.5,
        u_max: mx + 0.5,
    }
}

/// Measure category FLOPs and wall time for the full method (informed guess
/// + hybrid run) at each size, then fit total FLOPs vs n in log-log space.
///
/// The counters are process-global, so this runs serially with nothing else
/// counting.
pub fn flops_table(sizes: &[usize], stack: &ConvStack2D, iters: usize) -> Result<FlopsReport> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let problem = instrument_problem(n);
        let cfg = CostConfig::for_grid(problem.grid);
        let params = HybridParams::learned_default();
        let before = flops::snapshot();
        let start = Instant::now();
        let strategy = GuessStrategy::Informed(stack.clone());
        hybrid::run(&problem, &params, &strategy, iters, &cfg)?;
        let delta = flops::snapshot().since(&before);
        rows.push(FlopsRow {
            n,
            solver: delta.solver,
            cost: delta.cost,
            guess: delta.guess,
            optimizer: delta.optimizer,
            total: delta.total(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| (r.total as f64).ln()).collect();
    let (slope, _, residual) = fit_line(&xs, &ys);
    Ok(FlopsReport {
        rows,
        slope,
        residual,
    })
}

// ---------------------------------------------------------------------------
// extrapolation
// ---------------------------------------------------------------------------

/// One extrapolation run at a fixed grid size.
#[derive(Debug, Clone)]
pub struct ExtrapolateRow {
    pub n: usize,
    pub id: u64,
    pub initial_f: f64,
    pub best_f: f64,
    pub best_iteration: usize,
    pub aborted: bool,
}

/// Run the full method on grid sizes outside the training range. Problems
/// are drawn with the generator pinned to each size; the cost filter is
/// skipped (it exists to shape the training dataset, and its reference run
/// at large n would dwarf the probe itself).
pub fn extrapolate(
    seed: u64,
    sizes: &[usize],
    params: &HybridParams,
    strategy: &GuessStrategy,
    iters: usize,
) -> Result<Vec<ExtrapolateRow>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        if n < 10 {
            return Err(Error::Invalid(format!("extrapolation size {n} < 10")));
        }
        // scan indices until the range filter passes
        let mut index = 0u64;
        let problem = loop {
            match generate_problem_in(seed, index, n..=n, &|_| Ok(0.0))? {
                GenOutcome::Accepted(p) => break p,
                GenOutcome::Rejected(_) => index += 1,
            }
        };
        let cfg = CostConfig::for_grid(problem.grid);
        let run = hybrid::run(&problem, params, strategy, iters, &cfg)?;
        let rows_t = trace_rows(&run);
        let derived = derive_from_trace(&rows_t)?;
        rows.push(ExtrapolateRow {
            n,
            id: problem.id,
            initial_f: derived.initial_f,
            best_f: derived.best_f,
            best_iteration: derived.best_iteration,
            aborted: run.aborted.is_some(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BoundaryValues, DomainField};

    fn fixture_reference() -> Vec<ReferenceRecord> {
        vec![
            ReferenceRecord {
                id: 1,
                cost: 1.0,
                feasible: true,
                iterations: 30,
            },
            ReferenceRecord {
                id: 2,
                cost: 1.0,
                feasible: true,
                iterations: 25,
            },
            ReferenceRecord {
                id: 3,
                cost: 1.0,
                feasible: true,
                iterations: 40,
            },
            ReferenceRecord {
                id: 4,
                cost: 2.0,
                feasible: true,
                iterations: 18,
            },
        ]
    }

    #[test]
    fn compare_fixture_two_one_one() {
        let results = vec![
            (1u64, 0.5),           // win
            (2, 2.0),              // loss
            (3, 1.0 + 1e-12),      // tie
            (4, 1.0),              // win
        ];
        let summary = compare(&results, &fixture_reference()).unwrap();
        assert_eq!(
            (summary.wins, summary.losses, summary.ties),
            (2, 1, 1),
            "fixture outcome"
        );
        assert_eq!(summary.feasible, 4);
        assert_eq!(summary.win_rate, 50.0);
    }

    #[test]
    fn compare_excludes_infeasible() {
        let mut reference = fixture_reference();
        reference[3].feasible = false;
        let results = vec![(1u64, 0.5), (2, 2.0), (3, 1.0 + 1e-12), (4, 1.0)];
        let summary = compare(&results, &reference).unwrap();
        assert_eq!(summary.feasible, 3);
        assert_eq!(summary.infeasible_excluded, 1);
        assert_eq!((summary.wins, summary.losses, summary.ties), (1, 1, 1));
    }

    #[test]
    fn compare_rejects_unmatched_ids() {
        let results = vec![(1u64, 0.5), (9, 1.0)];
        let err = compare(&results, &fixture_reference()).unwrap_err();
        let message = err.to_string();
        assert!(message.contains('9'), "missing id listed: {message}");
    }

    #[test]
    fn compare_rejects_empty() {
        assert!(compare(&[], &fixture_reference()).is_err());
        // all-infeasible reference: denominator would be zero
        let mut reference = fixture_reference();
        for r in &mut reference {
            r.feasible = false;
        }
        let results = vec![(1u64, 0.5), (2, 2.0), (3, 1.0), (4, 1.0)];
        assert!(compare(&results, &reference).is_err());
    }

    #[test]
    fn reference_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.csv");
        let records = fixture_reference();
        save_reference(&records, &path).unwrap();
        assert_eq!(load_reference(&path).unwrap(), records);
    }

    fn harness_problem(n: usize, id: u64) -> Problem {
        let grid = Grid::new(n);
        let y_d = DomainField::from_fn(grid, |x1, x2| x1 - 0.4 * x2 + 0.3);
        Problem {
            id,
            grid,
            alpha: crate::problem::ALPHA,
            c: -10.0,
            expr: ProfileExpression {
                quad1: (0, 0),
                quad2: (0, 0),
                sin1: None,
                sin2: None,
            },
            y_d,
            u_d: BoundaryValues::zeros(grid),
            y_min: UNBOUNDED_BELOW,
            y_max: 2.0,
            u_min: -2.0,
            u_max: 2.0,
        }
    }

    #[test]
    fn trace_roundtrip_and_derivation() {
        let p = harness_problem(4, 7);
        let cfg = CostConfig::for_grid(p.grid);
        let run = hybrid::run(
            &p,
            &HybridParams::learned_default(),
            &GuessStrategy::Mean,
            6,
            &cfg,
        )
        .unwrap();
        let rows = trace_rows(&run);
        assert_eq!(rows.len(), 7);
        assert_eq!(rows.last().unwrap().adam_contrib, 0.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        save_trace(&rows, &path).unwrap();
        let back = load_trace(&path).unwrap();
        assert_eq!(rows, back, "trace round-trips exactly");

        let derived = derive_from_trace(&back).unwrap();
        assert_eq!(derived.best_f, run.best_cost);
        assert_eq!(derived.best_iteration, run.best_iteration);
        assert_eq!(derived.iterations_run, 6);
    }

    #[test]
    fn optimize_dataset_reports_are_trace_pure() {
        let problems: Vec<Problem> = (0..3).map(|i| harness_problem(4 + i as usize, i)).collect();
        let dir = tempfile::tempdir().unwrap();
        let out = optimize_dataset(
            &problems,
            &HybridParams::learned_default(),
            &GuessStrategy::Mean,
            5,
            None,
            Some(dir.path()),
            2,
        )
        .unwrap();
        assert_eq!(out.reports.len(), 3);
        for report in &out.reports {
            let rows = load_trace(&dir.path().join(format!("trace_{:06}.csv", report.id))).unwrap();
            assert_eq!(
                derive_from_trace(&rows).unwrap(),
                report.derived,
                "report fields rebuild from the stored trace"
            );
        }
        // worker count must not change results
        let serial = optimize_dataset(
            &problems,
            &HybridParams::learned_default(),
            &GuessStrategy::Mean,
            5,
            None,
            None,
            1,
        )
        .unwrap();
        for (a, b) in out.reports.iter().zip(&serial.reports) {
            assert_eq!(a.derived, b.derived);
            assert_eq!(a.id, b.id);
        }
    }

    #[test]
    fn report_roundtrip() {
        let problems: Vec<Problem> = (0..2).map(|i| harness_problem(4, i)).collect();
        let reference = vec![
            ReferenceRecord {
                id: 0,
                cost: 10.0,
                feasible: true,
                iterations: 5,
            },
            ReferenceRecord {
                id: 1,
                cost: 1e-30,
                feasible: true,
                iterations: 5,
            },
        ];
        let out = optimize_dataset(
            &problems,
            &HybridParams::learned_default(),
            &GuessStrategy::Mean,
            4,
            Some(&reference),
            None,
            1,
        )
        .unwrap();
        assert!(out.reports[0].first_beat.is_some(), "huge reference is beaten");
        assert_eq!(out.reports[1].first_beat, None, "tiny reference is not");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        save_report(&out.reports, &path).unwrap();
        let back = load_report(&path).unwrap();
        assert_eq!(out.reports, back);
    }

    #[test]
    fn summary_statistics() {
        let mk = |id, best: f64, initial: f64, aborted| RunReport {
            id,
            n: 4,
            c: 0.0,
            derived: TraceDerived {
                initial_f: initial,
                best_f: best,
                best_iteration: 1,
                final_f: best,
                best_f_o: best,
                best_f_v: 0.0,
                iterations_run: 4,
            },
            aborted,
            first_beat: None,
            wall_seconds: 0.0,
        };
        let reports = vec![
            mk(0, 1.0, 2.0, false),
            mk(1, 3.0, 3.0, false),
            mk(2, 2.0, 5.0, false),
            mk(3, 9.0, 9.0, true),
        ];
        let s = summarize(&reports);
        assert_eq!(s.problems, 4);
        assert_eq!(s.aborted, 1);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.median, 2.0);
        assert_eq!((s.min, s.max), (1.0, 3.0));
        assert_eq!(s.improved, 2);
    }

    #[test]
    fn guess_eval_and_histogram() {
        let problems: Vec<Problem> = (0..4).map(|i| harness_problem(5, i)).collect();
        let stack = ConvStack2D::near_identity(1, 0.02);
        let eval = eval_guesses(&problems, Some(&stack), 2).unwrap();
        assert_eq!(
            eval.strategies,
            vec!["mean", "median", "edge", "informed", "hybrid"]
        );
        let hist = cumulative_histogram(&eval);
        assert_eq!(hist.len(), 41);
        for s in 0..eval.strategies.len() {
            for w in hist.windows(2) {
                assert!(w[0].1[s] <= w[1].1[s], "cumulative counts non-decreasing");
            }
        }
        let wins = wins_by_sourcing(&eval).unwrap();
        assert_eq!(wins.len(), 1); // single sourcing term in the fixture
        assert_eq!(wins[0].problems, 4);

        // without weights the informed column is absent and the win table
        // reports a clear error
        let bare = eval_guesses(&problems, None, 1).unwrap();
        assert_eq!(bare.strategies.len(), 3);
        assert!(wins_by_sourcing(&bare).is_err());
    }

    #[test]
    fn edge_not_worse_than_mean_on_edge_exact_profile() {
        // constant reachable profile: the edge guess equals the mean guess,
        // so its cost is trivially not worse
        let grid = Grid::new(6);
        let y_d = DomainField::constant(grid, 0.8);
        let p = Problem {
            id: 0,
            grid,
            alpha: crate::problem::ALPHA,
            c: 0.0,
            expr: ProfileExpression {
                quad1: (0, 0),
                quad2: (0, 0),
                sin1: None,
                sin2: None,
            },
            y_d,
            u_d: BoundaryValues::zeros(grid),
            y_min: UNBOUNDED_BELOW,
            y_max: 2.0,
            u_min: -2.0,
            u_max: 2.0,
        };
        let eval = eval_guesses(&[p], None, 1).unwrap();
        let mean = eval.rows[0].costs[0];
        let edge = eval.rows[0].costs[2];
        assert!(edge <= mean + 1e-15);
    }

    #[test]
    fn fit_line_recovers_power_law() {
        // exact cubic data in log space fits with zero residual
        let xs: Vec<f64> = [16.0f64, 32.0, 64.0, 128.0].iter().map(|n| n.ln()).collect();
        let ys: Vec<f64> = [16.0f64, 32.0, 64.0, 128.0]
            .iter()
            .map(|n| (7.5 * n.powi(3)).ln())
            .collect();
        let (slope, intercept, residual) = fit_line(&xs, &ys);
        assert!((slope - 3.0).abs() < 1e-12);
        assert!((intercept - 7.5f64.ln()).abs() < 1e-12);
        assert!(residual < 1e-12);
    }

    #[test]
    fn flops_scaling_and_guess_share() {
        let stack = ConvStack2D::near_identity(0, 0.02);
        let report = flops_table(&[8, 16], &stack, 4).unwrap();
        assert_eq!(report.rows.len(), 2);
        // n doubled: solver kernel flops grow at least with the unknown count
        assert!(
            report.rows[1].solver >= 4 * report.rows[0].solver,
            "solver flops {} vs {}",
            report.rows[1].solver,
            report.rows[0].solver
        );
        assert!(report.slope > 2.0, "superquadratic total, got {}", report.slope);
        for row in &report.rows {
            assert!(row.guess > 0 && row.optimizer > 0);
        }
    }

    #[test]
    fn iteration_histogram_counts() {
        let hist = iteration_histogram([3usize, 1, 3, 0, 3].into_iter());
        assert_eq!(hist, vec![(0, 1), (1, 1), (3, 3)]);
    }

    #[test]
    fn split_proportions() {
        let problems: Vec<Problem> = (0..64).map(|i| harness_problem(4, i)).collect();
        let (train, val, test) = split_dataset(&problems);
        assert_eq!((train.len(), val.len(), test.len()), (52, 6, 6));
        assert_eq!(train[0].id, 0);
        assert_eq!(val[0].id, 52);
        assert_eq!(test[0].id, 58);
    }

    #[test]
    fn extrapolate_reuses_run_machinery() {
        let params = HybridParams::learned_default();
        let rows = extrapolate(11, &[10, 12], &params, &GuessStrategy::Mean, 3).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].n, 10);
        assert_eq!(rows[1].n, 12);
        for r in &rows {
            assert!(r.best_f.is_finite());
            assert!(!r.aborted);
        }
        assert!(extrapolate(11, &[9], &params, &GuessStrategy::Mean, 3).is_err());
    }
}
