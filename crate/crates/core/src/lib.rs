//! Boundary-control toolkit for the Poisson equation on the unit square.
//!
//! The crate covers the full loop of the control task: a finite-difference
//! forward solver, a barrier-penalized tracking cost with exact adjoint
//! gradients, a randomized problem generator, initial-guess strategies
//! (including a trainable convolutional one), first-order baselines, a
//! learned hybrid optimizer trained by policy gradients, and a benchmarking
//! harness with FLOP accounting.

pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod flops;
pub mod grid;
pub mod guess;
pub mod harness;
pub mod hybrid;
pub mod optimizers;
pub mod poisson;
pub mod problem;

pub use cost::{evaluate, evaluate_with_gradient, gradient, CostBreakdown, CostConfig};
pub use error::{Error, Result};
pub use guess::{guess, train_informed, ConvStack2D, GuessStrategy};
pub use harness::{
    compare, cumulative_histogram, eval_guesses, extrapolate, flops_table, generate_dataset,
    generate_dataset_in, load_reference, optimize_dataset, save_reference, split_dataset,
    summarize, wins_by_sourcing, CompareSummary, CostSummary, FlopsReport, GuessEval,
    OptimizeOutput, ReferenceRecord, RunReport, TraceRow,
};
pub use hybrid::{
    episode_log_density, episode_log_density_grad, hybrid_step, net_direction,
    probe_net_output_variation, run as run_hybrid, train_policy_gradient, ContributionRecord,
    EpisodeTape, HybridParams, HybridRun, HybridState, NetState, PolicyTrainConfig,
    PolicyTrainReport, SpatioTemporalNet, TemporalConvBlock,
};
pub use optimizers::{
    adam_direction, rmsprop_direction, run_bias_layer_baseline, AdamState, BaselineRun,
    OptimizerKind, RmsPropState,
};
pub use grid::{
    as_ring, clamp_boundary, clamp_domain, extract_edges, from_ring, BoundaryValues, DomainField,
    Grid,
};
pub use poisson::{
    residual, solve_poisson, solve_via_superposition, source_basis, SourceBasis, BASIS_SOURCE,
    DEFAULT_TOL,
};
pub use problem::{
    eval_profile, generate_problem, load_dataset, save_dataset, GenOutcome, Problem,
    ProfileExpression, RejectReason, SineTerm,
};
