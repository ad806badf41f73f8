//! Initial-guess strategies for the boundary control: three closed-form
//! baselines (mean, median, edge) and a trainable convolutional guess that
//! maps the desired profile to boundary data.
//!
//! The convolutional pipeline clamps the profile to the domain bounds,
//! subtracts the sourcing-term effect (the scaled stored basis solution),
//! shifts by the array minimum so the network sees non-negative inputs, runs
//! a four-layer convolution stack, restores the minimum, extracts the edges
//! and clamps them to the control bounds. Every stage has a hand-written
//! backward pass so the guess network can be trained directly against the
//! objective's boundary gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cost::{self, CostConfig};
use crate::error::{Error, Result};
use crate::flops::{self, Category};
use crate::grid::{self, BoundaryValues, DomainField, Grid};
use crate::poisson::SourceBasis;
use crate::problem::Problem;

/// Channel widths of the four convolution layers.
const CHANNELS: [usize; 5] = [1, 8, 8, 8, 1];

/// One 3x3 convolution layer with replicate same-padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Kernel weights, `[out][in][3][3]` row-major.
    pub weight: Vec<f64>,
    /// One bias per output channel.
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn zeros(in_ch: usize, out_ch: usize) -> Self {
        ConvLayer {
            in_ch,
            out_ch,
            weight: vec![0.0; out_ch * in_ch * 9],
            bias: vec![0.0; out_ch],
        }
    }

    fn w(&self, oc: usize, ic: usize, p: usize, q: usize) -> f64 {
        self.weight[((oc * self.in_ch + ic) * 3 + p) * 3 + q]
    }

    /// Forward pass over an `n x n` multi-channel image (channel-major).
    /// Returns pre-activation `z` and activation `a = max(z, 0)`.
    fn forward(&self, n: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_ch * n * n);
        let mut z = vec![0.0; self.out_ch * n * n];
        for oc in 0..self.out_ch {
            let base = oc * n * n;
            for i in 0..n {
                for j in 0..n {
                    let mut acc = self.bias[oc];
                    for ic in 0..self.in_ch {
                        let plane = ic * n * n;
                        for p in 0..3 {
                            let ii = (i as isize + p as isize - 1).clamp(0, n as isize - 1)
                                as usize;
                            for q in 0..3 {
                                let jj = (j as isize + q as isize - 1)
                                    .clamp(0, n as isize - 1)
                                    as usize;
                                acc += self.w(oc, ic, p, q) * x[plane + ii * n + jj];
                            }
                        }
                    }
                    z[base + i * n + j] = acc;
                }
            }
        }
        let a = z.iter().map(|&v| v.max(0.0)).collect();
        (z, a)
    }

    /// Backward pass: given input `x`, pre-activation `z` and the loss
    /// gradient w.r.t. the activation, produce parameter gradients and the
    /// gradient w.r.t. the input. Replicate padding scatters edge
    /// contributions back onto the clamped source index.
    fn backward(
        &self,
        n: usize,
        x: &[f64],
        z: &[f64],
        d_a: &[f64],
    ) -> (ConvLayer, Vec<f64>) {
        let mut grad = ConvLayer::zeros(self.in_ch, self.out_ch);
        let mut d_x = vec![0.0; self.in_ch * n * n];
        for oc in 0..self.out_ch {
            let base = oc * n * n;
            for i in 0..n {
                for j in 0..n {
                    let idx = base + i * n + j;
                    if z[idx] <= 0.0 {
                        continue; // ReLU gate closed
                    }
                    let dz = d_a[idx];
                    grad.bias[oc] += dz;
                    for ic in 0..self.in_ch {
                        let plane = ic * n * n;
                        for p in 0..3 {
                            let ii = (i as isize + p as isize - 1).clamp(0, n as isize - 1)
                                as usize;
                            for q in 0..3 {
                                let jj = (j as isize + q as isize - 1)
                                    .clamp(0, n as isize - 1)
                                    as usize;
                                let widx = ((oc * self.in_ch + ic) * 3 + p) * 3 + q;
                                grad.weight[widx] += dz * x[plane + ii * n + jj];
                                d_x[plane + ii * n + jj] += dz * self.weight[widx];
                            }
                        }
                    }
                }
            }
        }
        (grad, d_x)
    }
}

/// Four-layer convolution stack, channels 1 -> 8 -> 8 -> 8 -> 1, each layer
/// followed by a rectified-linear activation. The same weights apply to any
/// grid size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStack2D {
    pub layers: Vec<ConvLayer>,
}

impl ConvStack2D {
    pub fn zeros() -> Self {
        let layers = CHANNELS
            .windows(2)
            .map(|w| ConvLayer::zeros(w[0], w[1]))
            .collect();
        ConvStack2D { layers }
    }

    /// Random initialization: fan-in scaled weights, small positive biases.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stack = Self::zeros();
        for layer in &mut stack.layers {
            let dist = Normal::new(0.0, (2.0 / (layer.in_ch as f64 * 9.0)).sqrt()).unwrap();
            for w in &mut layer.weight {
                *w = dist.sample(&mut rng);
            }
            for b in &mut layer.bias {
                *b = 0.01;
            }
        }
        stack
    }

    /// Identity passthrough plus optional noise: each layer forwards the
    /// (channel-averaged) center tap, so the stack starts as the identity on
    /// non-negative inputs and training refines from there instead of from
    /// an arbitrary random map.
    pub fn near_identity(seed: u64, noise: f64) -> Self {
        let mut stack = Self::zeros();
        for layer in &mut stack.layers {
            let center = 1.0 / layer.in_ch as f64;
            for oc in 0..layer.out_ch {
                for ic in 0..layer.in_ch {
                    layer.weight[((oc * layer.in_ch + ic) * 3 + 1) * 3 + 1] = center;
                }
            }
        }
        if noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Normal::new(0.0, noise).unwrap();
            for layer in &mut stack.layers {
                for w in &mut layer.weight {
                    *w += dist.sample(&mut rng);
                }
                for b in &mut layer.bias {
                    *b += dist.sample(&mut rng);
                }
            }
        }
        stack
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// All parameters as one flat vector (layer order, weights then biases).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`flatten`].
    pub fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter count mismatch");
        let mut k = 0;
        for l in &mut self.layers {
            let wl = l.weight.len();
            l.weight.copy_from_slice(&flat[k..k + wl]);
            k += wl;
            let bl = l.bias.len();
            l.bias.copy_from_slice(&flat[k..k + bl]);
            k += bl;
        }
    }

    /// Single-channel forward pass over an interior field.
    pub fn forward(&self, input: &DomainField) -> DomainField {
        let (out, _) = self.forward_cached(input);
        out
    }

    fn forward_cached(&self, input: &DomainField) -> (DomainField, StackCache) {
        let n = input.grid().n();
        let mut cache = StackCache {
            inputs: Vec::with_capacity(self.layers.len()),
            zs: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.values().to_vec();
        for layer in &self.layers {
            let (z, a) = layer.forward(n, &x);
            cache.inputs.push(x);
            cache.zs.push(z);
            x = a;
        }
        let pairs: usize = CHANNELS.windows(2).map(|w| w[0] * w[1]).sum();
        flops::add(Category::Guess, (18 * pairs * n * n) as u64);
        (DomainField::new(input.grid(), x), cache)
    }

    /// Backprop through the stack. Returns per-parameter gradients (same
    /// shapes as `self`) and the gradient w.r.t. the stack input.
    fn backward(&self, grid: Grid, cache: &StackCache, d_out: &[f64]) -> (ConvStack2D, Vec<f64>) {
        let n = grid.n();
        let mut grads: Vec<ConvLayer> = Vec::with_capacity(self.layers.len());
        let mut d = d_out.to_vec();
        for (layer, (x, z)) in self
            .layers
            .iter()
            .zip(cache.inputs.iter().zip(&cache.zs))
            .rev()
        {
            let (g, dx) = layer.backward(n, x, z, &d);
            grads.push(g);
            d = dx;
        }
        grads.reverse();
        (ConvStack2D { layers: grads }, d)
    }
}

struct StackCache {
    inputs: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
}

/// How to produce the starting boundary control for a problem.
#[derive(Debug, Clone, PartialEq)]
pub enum GuessStrategy {
    /// Constant guess at the clamped mean of the desired profile.
    Mean,
    /// Constant guess at the clamped median.
    Median,
    /// Outermost values of the desired profile, clamped.
    Edge,
    /// Convolutional guess.
    Informed(ConvStack2D),
    /// Edge when the sourcing term is zero, informed otherwise.
    Hybrid(ConvStack2D),
}

impl GuessStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            GuessStrategy::Mean => "mean",
            GuessStrategy::Median => "median",
            GuessStrategy::Edge => "edge",
            GuessStrategy::Informed(_) => "informed",
            GuessStrategy::Hybrid(_) => "hybrid",
        }
    }
}

/// The network input of the informed pipeline: the profile clamped to the
/// domain bounds, minus the sourcing-term effect, shifted by its minimum so
/// every entry is non-negative. Returns the shifted field and the minimum.
pub(crate) fn informed_input(problem: &Problem, basis: &SourceBasis) -> Result<(DomainField, f64)> {
    if basis.grid() != problem.grid {
        return Err(Error::GridMismatch {
            expected: problem.grid.n(),
            actual: basis.grid().n(),
        });
    }
    let clamped = grid::clamp_domain(&problem.y_d, problem.y_min, problem.y_max)?;
    let source = basis.scaled(problem.c);
    let mut x = clamped;
    for (v, s) in x.values_mut().iter_mut().zip(source.values()) {
        *v -= s;
    }
    let m = x.min();
    for v in x.values_mut() {
        *v -= m;
    }
    Ok((x, m))
}

fn constant_guess(problem: &Problem, value: f64) -> Result<BoundaryValues> {
    grid::clamp_boundary(
        &BoundaryValues::constant(problem.grid, value),
        problem.u_min,
        problem.u_max,
    )
}

fn informed_guess(problem: &Problem, basis: &SourceBasis, stack: &ConvStack2D) -> Result<BoundaryValues> {
    let (x, m) = informed_input(problem, basis)?;
    let mut restored = stack.forward(&x);
    for v in restored.values_mut() {
        *v += m;
    }
    grid::clamp_boundary(
        &grid::extract_edges(&restored),
        problem.u_min,
        problem.u_max,
    )
}

/// Produce the initial boundary control for a problem under a strategy.
pub fn guess(
    strategy: &GuessStrategy,
    problem: &Problem,
    basis: &SourceBasis,
) -> Result<BoundaryValues> {
    let n = problem.grid.n();
    match strategy {
        GuessStrategy::Mean => {
            flops::add(Category::Guess, (n * n) as u64);
            constant_guess(problem, problem.y_d.mean())
        }
        GuessStrategy::Median => {
            flops::add(Category::Guess, (n * n) as u64);
            constant_guess(problem, problem.y_d.median())
        }
        GuessStrategy::Edge => {
            flops::add(Category::Guess, (4 * n) as u64);
            grid::clamp_boundary(
                &grid::extract_edges(&problem.y_d),
                problem.u_min,
                problem.u_max,
            )
        }
        GuessStrategy::Informed(stack) => informed_guess(problem, basis, stack),
        GuessStrategy::Hybrid(stack) => {
            if problem.c == 0.0 {
                guess(&GuessStrategy::Edge, problem, basis)
            } else {
                informed_guess(problem, basis, stack)
            }
        }
    }
}

/// Forward pass of the informed pipeline with everything the backward pass
/// needs retained.
struct InformedTrace {
    u: BoundaryValues,
    /// Pre-clamp boundary values (the extracted edges plus the minimum).
    edges_pre: BoundaryValues,
    cache: StackCache,
    /// Index of the array minimum in the pre-shift field.
    argmin: usize,
}

fn informed_forward(
    problem: &Problem,
    basis: &SourceBasis,
    stack: &ConvStack2D,
) -> Result<InformedTrace> {
    let (x, m) = informed_input(problem, basis)?;
    // locate the pre-shift argmin: the shifted field attains 0 there
    let argmin = x
        .values()
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(k, _)| k)
        .unwrap();
    let (mut restored, cache) = stack.forward_cached(&x);
    for v in restored.values_mut() {
        *v += m;
    }
    let edges_pre = grid::extract_edges(&restored);
    let u = grid::clamp_boundary(&edges_pre, problem.u_min, problem.u_max)?;
    Ok(InformedTrace {
        u,
        edges_pre,
        cache,
        argmin,
    })
}

/// Backward pass of the informed pipeline: fold `dF/du` back into parameter
/// gradients. `d_u` is the objective gradient at the clamped guess.
fn informed_backward(
    problem: &Problem,
    stack: &ConvStack2D,
    trace: &InformedTrace,
    d_u: &BoundaryValues,
) -> ConvStack2D {
    let grid_ = problem.grid;
    let n = grid_.n();

    // clamp backward: pass-through strictly inside the bounds
    let gate = |pre: f64, d: f64| {
        if pre > problem.u_min && pre < problem.u_max {
            d
        } else {
            0.0
        }
    };
    // edge-extraction backward: scatter the boundary gradient onto the
    // outermost field entries; array corners receive both a row and a
    // column contribution
    let mut d_restored = vec![0.0; grid_.interior_len()];
    for j in 0..n {
        d_restored[j] += gate(trace.edges_pre.top[j], d_u.top[j]);
        d_restored[(n - 1) * n + j] += gate(trace.edges_pre.bottom[j], d_u.bottom[j]);
    }
    for i in 0..n {
        d_restored[i * n] += gate(trace.edges_pre.left[i], d_u.left[i]);
        d_restored[i * n + n - 1] += gate(trace.edges_pre.right[i], d_u.right[i]);
    }

    // the restored output is net(x - m) + m; only the net part carries
    // parameter dependence, so the parameter chain stops at the stack input
    let (grads, _d_input) = stack.backward(grid_, &trace.cache, &d_restored);
    let _ = trace.argmin; // input-side min-shift gradient unused for weights
    grads
}

/// Mean objective value of the informed guess over a problem set.
fn mean_guess_cost(stack: &ConvStack2D, problems: &[Problem]) -> Result<f64> {
    let mut total = 0.0;
    for p in problems {
        let basis = crate::poisson::source_basis(p.grid)?;
        let u = informed_guess(p, &basis, stack)?;
        let cfg = CostConfig::for_grid(p.grid);
        total += cost::evaluate(p, &u, &cfg)?.f;
    }
    Ok(total / problems.len() as f64)
}

/// Progress record of [`train_informed`].
#[derive(Debug, Clone)]
pub struct GuessTrainReport {
    /// Weights with the lowest validation mean cost (the initial weights are
    /// a candidate).
    pub stack: ConvStack2D,
    /// Mean training cost per epoch, measured before each update.
    pub train_costs: Vec<f64>,
    /// Mean validation cost per candidate: entry 0 is the initial weights,
    /// entry `e + 1` follows epoch `e`.
    pub val_costs: Vec<f64>,
    /// Index into `val_costs` of the returned weights.
    pub best_index: usize,
}

/// Train the informed-guess network by gradient descent on the mean
/// objective of its guesses. The gradient chains the objective's boundary
/// gradient through the clamp, edge-extraction and conv-stack backward
/// passes; the global gradient norm is clipped at 1.0. Returns the weights
/// with the lowest validation mean cost.
pub fn train_informed(
    init: &ConvStack2D,
    train: &[Problem],
    val: &[Problem],
    epochs: usize,
    lr: f64,
) -> Result<GuessTrainReport> {
    assert!(!train.is_empty() && !val.is_empty(), "empty split");
    let mut stack = init.clone();
    let mut params = stack.flatten();

    let mut val_costs = vec![mean_guess_cost(&stack, val)?];
    let mut best = (0usize, val_costs[0], stack.clone());
    let mut train_costs = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let mut grad_flat = vec![0.0; params.len()];
        let mut loss = 0.0;
        for p in train {
            let basis = crate::poisson::source_basis(p.grid)?;
            let trace = informed_forward(p, &basis, &stack)?;
            let cfg = CostConfig::for_grid(p.grid);
            let (breakdown, d_u) = cost::evaluate_with_gradient(p, &trace.u, &cfg)?;
            loss += breakdown.f;
            let grads = informed_backward(p, &stack, &trace, &d_u);
            for (acc, g) in grad_flat.iter_mut().zip(grads.flatten()) {
                *acc += g;
            }
        }
        let m = train.len() as f64;
        loss /= m;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "non-finite training cost at epoch {epoch}"
            )));
        }
        train_costs.push(loss);

        for g in &mut grad_flat {
            *g /= m;
        }
        let norm = grad_flat.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > 1.0 {
            for g in &mut grad_flat {
                *g /= norm;
            }
        }
        for (p, g) in params.iter_mut().zip(&grad_flat) {
            *p -= lr * g;
        }
        stack.assign(&params);

        let vc = mean_guess_cost(&stack, val)?;
        val_costs.push(vc);
        if vc < best.1 {
            best = (epoch + 1, vc, stack.clone());
        }
    }

    Ok(GuessTrainReport {
        stack: best.2,
        train_costs,
        val_costs,
        best_index: best.0,
    })
}
