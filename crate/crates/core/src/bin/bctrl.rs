//! `bctrl` — boundary-control toolkit command line.
//!
//! Subcommands cover the full experiment loop: dataset generation, guess
//! evaluation and training, optimizer training, batch optimization with
//! trace emission, comparison against imported reference results, FLOP
//! accounting, and size extrapolation. All commands are deterministic for a
//! fixed seed and inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bctrl_core::checkpoint;
use bctrl_core::guess::{train_informed, ConvStack2D, GuessStrategy};
use bctrl_core::harness::{
    compare, cumulative_histogram, eval_guesses, extrapolate, flops_table, generate_dataset,
    iteration_histogram, load_reference, load_report, optimize_dataset, save_report, split_dataset,
    summarize, wins_by_sourcing,
};
use bctrl_core::hybrid::{train_policy_gradient, HybridParams, PolicyTrainConfig};
use bctrl_core::problem::{fmt_real, load_dataset, save_dataset};
use bctrl_core::Result;

#[derive(Parser)]
#[command(
    name = "bctrl",
    about = "Dirichlet boundary-control toolkit for the Poisson equation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct WorkerOpt {
    /// Worker threads (0 = one per core). Output is identical regardless.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a problem dataset CSV.
    Generate {
        /// Master seed; each generator index derives its own stream.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Accepted problems to keep.
        #[arg(long)]
        count: usize,
        /// Output dataset CSV.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: WorkerOpt,
    },
    /// Evaluate initial-guess strategies over a dataset.
    EvalGuesses {
        #[arg(long)]
        dataset: PathBuf,
        /// Guess-network checkpoint; enables the informed and hybrid columns.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Output CSV of per-problem guess costs; the cumulative histogram
        /// and the per-sourcing-term win table land next to it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: WorkerOpt,
    },
    /// Train the informed-guess network on a dataset (80:10:10 split).
    TrainGuess {
        #[arg(long)]
        dataset: PathBuf,
        /// Initialization seed for the near-identity start.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training epochs.
        #[arg(long, default_value_t = 40)]
        iters: usize,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the hybrid optimizer by policy gradient (80:10:10 split).
    TrainOpt {
        #[arg(long)]
        dataset: PathBuf,
        /// Exploration-noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training episodes.
        #[arg(long, default_value_t = 200)]
        iters: usize,
        /// Initial parameters checkpoint; a seeded random network otherwise.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Use the final reward for every step's return instead of
        /// reward-to-go.
        #[arg(long)]
        final_cost_return: bool,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the hybrid optimizer over a dataset and emit traces and reports.
    Optimize {
        #[arg(long)]
        dataset: PathBuf,
        /// Hybrid-parameter checkpoint; the default learned learning rates
        /// with a zero network otherwise.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Optimizer iterations per problem.
        #[arg(long, default_value_t = 32)]
        iters: usize,
        /// Initial-guess strategy: mean, median, edge, informed or hybrid.
        #[arg(long, default_value = "mean")]
        guess: String,
        /// Guess-network checkpoint (required by informed and hybrid).
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Reference CSV enabling the first-beat-reference histogram.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Output directory: traces/, report.csv, summary.csv, histograms.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        workers: WorkerOpt,
    },
    /// Compare a run report against reference-solver results.
    Compare {
        /// report.csv produced by `optimize`.
        report: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Optional summary CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure FLOPs and wall time of the full method across grid sizes.
    Flops {
        /// Optimizer iterations per size.
        #[arg(long, default_value_t = 32)]
        iters: usize,
        /// Guess-network checkpoint; a near-identity network otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Output CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full method on grid sizes outside the training range.
    Extrapolate {
        /// Grid sizes to probe, e.g. 150 200.
        #[arg(required = true)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Guess-network checkpoint; the mean guess otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        iters: usize,
        /// Output CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_params(path: &Option<PathBuf>) -> Result<HybridParams> {
    match path {
        Some(p) => checkpoint::load_hybrid_params(p),
        None => Ok(HybridParams::learned_default()),
    }
}

fn strategy_from_flags(name: &str, weights: &Option<PathBuf>) -> Result<GuessStrategy> {
    let stack = |weights: &Option<PathBuf>| -> Result<ConvStack2D> {
        match weights {
            Some(p) => checkpoint::load_guess_weights(p),
            None => Err(bctrl_core::Error::Invalid(format!(
                "the {name} guess needs --weights"
            ))),
        }
    };
    match name {
        "mean" => Ok(GuessStrategy::Mean),
        "median" => Ok(GuessStrategy::Median),
        "edge" => Ok(GuessStrategy::Edge),
        "informed" => Ok(GuessStrategy::Informed(stack(weights)?)),
        "hybrid" => Ok(GuessStrategy::Hybrid(stack(weights)?)),
        other => Err(bctrl_core::Error::Invalid(format!(
            "unknown guess strategy {other:?}"
        ))),
    }
}

fn write_csv(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

/// Sibling path `<stem>_<suffix>.csv` next to `out`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn median_of(sorted: &mut Vec<f64>) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted.is_empty() {
        f64::NAN
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    }
}

fn cmd_generate(seed: u64, count: usize, out: &Path, workers: usize) -> Result<()> {
    let report = generate_dataset(seed, count, workers)?;
    save_dataset(&report.problems, out)?;
    println!(
        "generate: kept {} problems from {} draws ({} range-rejected, {} cost-rejected) -> {}",
        report.problems.len(),
        report.scanned,
        report.rejected_range,
        report.rejected_cost,
        out.display()
    );
    Ok(())
}

fn cmd_eval_guesses(
    dataset: &Path,
    weights: &Option<PathBuf>,
    out: &Path,
    workers: usize,
) -> Result<()> {
    let problems = load_dataset(dataset)?;
    let stack = match weights {
        Some(p) => Some(checkpoint::load_guess_weights(p)?),
        None => None,
    };
    let eval = eval_guesses(&problems, stack.as_ref(), workers)?;

    let mut costs = format!("id,n,c,{}\n", eval.strategies.join(","));
    for row in &eval.rows {
        let cols: Vec<String> = row.costs.iter().map(|&c| fmt_real(c)).collect();
        writeln!(
            costs,
            "{},{},{},{}",
            row.id,
            row.n,
            fmt_real(row.c),
            cols.join(",")
        )
        .unwrap();
    }
    write_csv(out, &costs)?;

    let hist_path = sibling(out, "hist");
    let mut hist = format!("threshold,{}\n", eval.strategies.join(","));
    for (threshold, counts) in cumulative_histogram(&eval) {
        let cols: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
        writeln!(hist, "{},{}", fmt_real(threshold), cols.join(",")).unwrap();
    }
    write_csv(&hist_path, &hist)?;
    println!(
        "eval-guesses: {} problems, {} strategies -> {} + {}",
        eval.rows.len(),
        eval.strategies.len(),
        out.display(),
        hist_path.display()
    );

    if stack.is_some() {
        let wins_path = sibling(out, "wins_by_c");
        let mut wins = String::from("c,problems,informed_wins,edge_wins,ties\n");
        for w in wins_by_sourcing(&eval)? {
            writeln!(
                wins,
                "{},{},{},{},{}",
                fmt_real(w.c),
                w.problems,
                w.informed_wins,
                w.edge_wins,
                w.ties
            )
            .unwrap();
        }
        write_csv(&wins_path, &wins)?;
        println!("eval-guesses: informed-vs-edge wins by c -> {}", wins_path.display());
    }
    Ok(())
}

fn cmd_train_guess(dataset: &Path, seed: u64, epochs: usize, out: &Path) -> Result<()> {
    let problems = load_dataset(dataset)?;
    let (train, val, test) = split_dataset(&problems);
    let init = ConvStack2D::near_identity(seed, 0.05);
    let report = train_informed(&init, train, val, epochs, 0.05)?;
    checkpoint::save_guess_weights(out, &report.stack)?;
    println!(
        "train-guess: {} train / {} val / {} test problems, best epoch {} \
         (val {:.6} -> {:.6}) -> {}",
        train.len(),
        val.len(),
        test.len(),
        report.best_index,
        report.val_costs[0],
        report.val_costs[report.best_index],
        out.display()
    );

    // held-out comparison of the trained guess against the constant baselines
    let eval = eval_guesses(test, Some(&report.stack), 0)?;
    for (k, name) in eval.strategies.iter().enumerate() {
        let mut costs: Vec<f64> = eval.rows.iter().map(|r| r.costs[k]).collect();
        println!("train-guess: held-out median {} cost {:.6}", name, median_of(&mut costs));
    }
    Ok(())
}

fn cmd_train_opt(
    dataset: &Path,
    seed: u64,
    episodes: usize,
    params: &Option<PathBuf>,
    final_cost_return: bool,
    out: &Path,
) -> Result<()> {
    let problems = load_dataset(dataset)?;
    let (train, val, _) = split_dataset(&problems);
    let params0 = match params {
        Some(p) => checkpoint::load_hybrid_params(p)?,
        None => HybridParams::seeded(seed),
    };
    let tcfg = PolicyTrainConfig {
        episodes,
        seed,
        final_cost_return,
        ..PolicyTrainConfig::default()
    };
    let report = train_policy_gradient(&params0, train, val, &tcfg)?;
    checkpoint::save_hybrid_params(out, &report.params)?;
    println!(
        "train-opt: {} episodes over {} train problems, checkpoint {} of {} \
         (val {:.6} -> {:.6}) -> {}",
        episodes,
        train.len(),
        report.best_index,
        report.val_costs.len(),
        report.val_costs[0],
        report.val_costs[report.best_index],
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_optimize(
    dataset: &Path,
    params: &Option<PathBuf>,
    iters: usize,
    guess_name: &str,
    weights: &Option<PathBuf>,
    reference: &Option<PathBuf>,
    out: &Path,
    workers: usize,
) -> Result<()> {
    let problems = load_dataset(dataset)?;
    let params = load_params(params)?;
    let strategy = strategy_from_flags(guess_name, weights)?;
    let reference = match reference {
        Some(p) => Some(load_reference(p)?),
        None => None,
    };
    let trace_dir = out.join("traces");
    fs::create_dir_all(&trace_dir)?;
    let output = optimize_dataset(
        &problems,
        &params,
        &strategy,
        iters,
        reference.as_deref(),
        Some(&trace_dir),
        workers,
    )?;

    save_report(&output.reports, &out.join("report.csv"))?;

    let s = summarize(&output.reports);
    let mut summary = String::from("metric,value\n");
    writeln!(summary, "problems,{}", s.problems).unwrap();
    writeln!(summary, "aborted,{}", s.aborted).unwrap();
    writeln!(summary, "improved,{}", s.improved).unwrap();
    writeln!(summary, "mean_best_f,{}", fmt_real(s.mean)).unwrap();
    writeln!(summary, "median_best_f,{}", fmt_real(s.median)).unwrap();
    writeln!(summary, "min_best_f,{}", fmt_real(s.min)).unwrap();
    writeln!(summary, "max_best_f,{}", fmt_real(s.max)).unwrap();
    writeln!(summary, "solver_flops,{}", output.flops.solver).unwrap();
    writeln!(summary, "cost_flops,{}", output.flops.cost).unwrap();
    writeln!(summary, "guess_flops,{}", output.flops.guess).unwrap();
    writeln!(summary, "optimizer_flops,{}", output.flops.optimizer).unwrap();
    writeln!(summary, "wall_seconds,{}", fmt_real(output.wall_seconds)).unwrap();
    write_csv(&out.join("summary.csv"), &summary)?;

    let mut best_hist = String::from("iteration,count\n");
    for (iter, count) in iteration_histogram(
        output
            .reports
            .iter()
            .filter(|r| !r.aborted)
            .map(|r| r.derived.best_iteration),
    ) {
        writeln!(best_hist, "{iter},{count}").unwrap();
    }
    write_csv(&out.join("best_iter_hist.csv"), &best_hist)?;

    if reference.is_some() {
        let mut beat_hist = String::from("iteration,count\n");
        for (iter, count) in
            iteration_histogram(output.reports.iter().filter_map(|r| r.first_beat))
        {
            writeln!(beat_hist, "{iter},{count}").unwrap();
        }
        write_csv(&out.join("first_beat_hist.csv"), &beat_hist)?;
    }

    println!(
        "optimize: {} problems x {} iters ({} aborted), mean best {:.6}, \
         median best {:.6} -> {}",
        s.problems,
        iters,
        s.aborted,
        s.mean,
        s.median,
        out.display()
    );
    Ok(())
}

fn cmd_compare(report_path: &Path, reference_path: &Path, out: &Option<PathBuf>) -> Result<()> {
    let reports = load_report(report_path)?;
    let reference = load_reference(reference_path)?;
    let results: Vec<(u64, f64)> = reports
        .iter()
        .filter(|r| !r.aborted)
        .map(|r| (r.id, r.derived.best_f))
        .collect();
    let summary = compare(&results, &reference)?;
    println!(
        "compare: {} wins / {} losses / {} ties over {} feasible \
         ({} infeasible excluded), win rate {:.1}%",
        summary.wins,
        summary.losses,
        summary.ties,
        summary.feasible,
        summary.infeasible_excluded,
        summary.win_rate
    );
    if let Some(path) = out {
        let mut text = String::from("metric,value\n");
        writeln!(text, "wins,{}", summary.wins).unwrap();
        writeln!(text, "losses,{}", summary.losses).unwrap();
        writeln!(text, "ties,{}", summary.ties).unwrap();
        writeln!(text, "feasible,{}", summary.feasible).unwrap();
        writeln!(text, "infeasible_excluded,{}", summary.infeasible_excluded).unwrap();
        writeln!(text, "win_rate_percent,{}", fmt_real(summary.win_rate)).unwrap();
        write_csv(path, &text)?;
    }
    Ok(())
}

fn cmd_flops(iters: usize, weights: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<()> {
    let stack = match weights {
        Some(p) => checkpoint::load_guess_weights(p)?,
        None => ConvStack2D::near_identity(0, 0.05),
    };
    let report = flops_table(&[16, 32, 64, 128], &stack, iters)?;
    let mut text =
        String::from("n,solver_flops,cost_flops,guess_flops,optimizer_flops,total_flops,wall_seconds\n");
    for row in &report.rows {
        writeln!(
            text,
            "{},{},{},{},{},{},{}",
            row.n,
            row.solver,
            row.cost,
            row.guess,
            row.optimizer,
            row.total,
            fmt_real(row.wall_seconds)
        )
        .unwrap();
        println!(
            "flops: n={:3}  solver {:>14}  cost {:>12}  guess {:>10}  optimizer {:>12}  {:.3}s",
            row.n, row.solver, row.cost, row.guess, row.optimizer, row.wall_seconds
        );
    }
    println!(
        "flops: log-log slope {:.3} (rms residual {:.3}) over n in {{16,32,64,128}}",
        report.slope, report.residual
    );
    if let Some(path) = out {
        write_csv(path, &text)?;
    }
    Ok(())
}

fn cmd_extrapolate(
    sizes: &[usize],
    seed: u64,
    params: &Option<PathBuf>,
    weights: &Option<PathBuf>,
    iters: usize,
    out: &Option<PathBuf>,
) -> Result<()> {
    let params = load_params(params)?;
    let strategy = match weights {
        Some(p) => GuessStrategy::Informed(checkpoint::load_guess_weights(p)?),
        None => GuessStrategy::Mean,
    };
    let rows = extrapolate(seed, sizes, &params, &strategy, iters)?;
    let mut text = String::from("n,id,initial_f,best_f,best_iteration,aborted\n");
    for row in &rows {
        writeln!(
            text,
            "{},{},{},{},{},{}",
            row.n,
            row.id,
            fmt_real(row.initial_f),
            fmt_real(row.best_f),
            row.best_iteration,
            u8::from(row.aborted)
        )
        .unwrap();
        println!(
            "extrapolate: n={} initial {:.6} best {:.6} at iteration {}{}",
            row.n,
            row.initial_f,
            row.best_f,
            row.best_iteration,
            if row.aborted { " (aborted)" } else { "" }
        );
    }
    if let Some(path) = out {
        write_csv(path, &text)?;
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate {
            seed,
            count,
            out,
            workers,
        } => cmd_generate(*seed, *count, out, workers.workers),
        Command::EvalGuesses {
            dataset,
            weights,
            out,
            workers,
        } => cmd_eval_guesses(dataset, weights, out, workers.workers),
        Command::TrainGuess {
            dataset,
            seed,
            iters,
            out,
        } => cmd_train_guess(dataset, *seed, *iters, out),
        Command::TrainOpt {
            dataset,
            seed,
            iters,
            params,
            final_cost_return,
            out,
        } => cmd_train_opt(dataset, *seed, *iters, params, *final_cost_return, out),
        Command::Optimize {
            dataset,
            params,
            iters,
            guess,
            weights,
            reference,
            out,
            workers,
        } => cmd_optimize(
            dataset,
            params,
            *iters,
            guess,
            weights,
            reference,
            out,
            workers.workers,
        ),
        Command::Compare {
            report,
            reference,
            out,
        } => cmd_compare(report, reference, out),
        Command::Flops { iters, weights, out } => cmd_flops(*iters, weights, out),
        Command::Extrapolate {
            sizes,
            seed,
            params,
            weights,
            iters,
            out,
        } => cmd_extrapolate(sizes, *seed, params, weights, *iters, out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bctrl: {e}");
            ExitCode::from(2)
        }
    }
}
