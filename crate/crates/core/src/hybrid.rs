//! The learned hybrid optimizer: Adam and RMSProp directions blended with a
//! spatio-temporal network direction through three learnable learning rates,
//! plus the policy-gradient trainer and contribution diagnostics.
//!
//! The network sees the boundary gradient as a closed ring of length `4n`
//! with three input channels (the gradient, its square and its cube), runs
//! two temporal convolution blocks (circular 1-D convolution + ReLU followed
//! by a per-position LSTM cell with shared weights) and a circular head
//! convolution with ReLU. The non-negative head output is a magnitude that
//! multiplies the sign of the gradient, so the network direction never
//! opposes the gradient elementwise.
//!
//! Training treats the deterministic update as the mean of a Gaussian policy
//! over the control increment and ascends the REINFORCE objective with
//! reward-to-go and a per-step moving-average baseline. The PDE solve is an
//! environment: gradients flow through the network chain (including the
//! recurrent states, backpropagated through time) but never through the
//! solver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cost::{self, CostBreakdown, CostConfig};
use crate::error::{Error, Result};
use crate::flops::{self, Category};
use crate::grid::{as_ring, from_ring, BoundaryValues, Grid};
use crate::guess::{guess, GuessStrategy};
use crate::optimizers::{adam_direction, rmsprop_direction, AdamState, RmsPropState};
use crate::poisson::source_basis;
use crate::problem::Problem;

/// Channel width shared by the block convolutions and LSTM cells.
const DIM: usize = 8;

/// Input channels of the first block: gradient, square, cube.
const IN_CH: usize = 3;

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// 1-D convolution over a closed ring, kernel 3, circular padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Kernel weights, `[out][in][3]` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Conv1d {
            in_ch,
            out_ch,
            weight: vec![0.0; out_ch * in_ch * 3],
            bias: vec![0.0; out_ch],
        }
    }

    /// Pre-activation forward over channel-major input `x` of shape
    /// `in_ch x l`.
    fn forward(&self, l: usize, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_ch * l);
        let mut z = vec![0.0; self.out_ch * l];
        for oc in 0..self.out_ch {
            for p in 0..l {
                let mut acc = self.bias[oc];
                for ic in 0..self.in_ch {
                    let base = (oc * self.in_ch + ic) * 3;
                    let row = ic * l;
                    let pm = (p + l - 1) % l;
                    let pp = (p + 1) % l;
                    acc += self.weight[base] * x[row + pm]
                        + self.weight[base + 1] * x[row + p]
                        + self.weight[base + 2] * x[row + pp];
                }
                z[oc * l + p] = acc;
            }
        }
        z
    }

    /// Backward over the pre-activation gradient `dz`; returns parameter
    /// gradients (same shapes) and the input gradient.
    fn backward(&self, l: usize, x: &[f64], dz: &[f64]) -> (Conv1d, Vec<f64>) {
        let mut grad = Conv1d::zeros(self.in_ch, self.out_ch);
        let mut dx = vec![0.0; self.in_ch * l];
        for oc in 0..self.out_ch {
            for p in 0..l {
                let d = dz[oc * l + p];
                if d == 0.0 {
                    continue;
                }
                grad.bias[oc] += d;
                for ic in 0..self.in_ch {
                    let base = (oc * self.in_ch + ic) * 3;
                    let row = ic * l;
                    let pm = (p + l - 1) % l;
                    let pp = (p + 1) % l;
                    grad.weight[base] += d * x[row + pm];
                    grad.weight[base + 1] += d * x[row + p];
                    grad.weight[base + 2] += d * x[row + pp];
                    dx[row + pm] += d * self.weight[base];
                    dx[row + p] += d * self.weight[base + 1];
                    dx[row + pp] += d * self.weight[base + 2];
                }
            }
        }
        (grad, dx)
    }
}

/// LSTM cell with shared weights applied independently at every ring
/// position; input and hidden width are both [`DIM`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    /// Input weights, `[gate][row][col]` with gate order i, f, g, o.
    pub w: Vec<f64>,
    /// Recurrent weights, same layout.
    pub u: Vec<f64>,
    /// Gate biases, `[gate][row]`.
    pub b: Vec<f64>,
}

impl LstmCell {
    fn zeros() -> Self {
        LstmCell {
            w: vec![0.0; 4 * DIM * DIM],
            u: vec![0.0; 4 * DIM * DIM],
            b: vec![0.0; 4 * DIM],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One temporal block: circular convolution + ReLU feeding a per-position
/// LSTM cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalConvBlock {
    pub conv: Conv1d,
    pub lstm: LstmCell,
}

impl TemporalConvBlock {
    fn zeros(in_ch: usize) -> Self {
        TemporalConvBlock {
            conv: Conv1d::zeros(in_ch, DIM),
            lstm: LstmCell::zeros(),
        }
    }
}

/// Recurrent state of one block: hidden and cell arrays, position-major
/// `l x DIM`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl BlockState {
    fn zeros(l: usize) -> Self {
        BlockState {
            h: vec![0.0; l * DIM],
            c: vec![0.0; l * DIM],
        }
    }
}

/// The full network: two temporal blocks and the magnitude head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalNet {
    pub block1: TemporalConvBlock,
    pub block2: TemporalConvBlock,
    pub head: Conv1d,
}

impl SpatioTemporalNet {
    pub fn zeros() -> Self {
        SpatioTemporalNet {
            block1: TemporalConvBlock::zeros(IN_CH),
            block2: TemporalConvBlock::zeros(DIM),
            head: Conv1d::zeros(DIM, 1),
        }
    }
}

/// Recurrent state of the network, reset at episode start.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    pub b1: BlockState,
    pub b2: BlockState,
}

impl NetState {
    pub fn zeros(ring_len: usize) -> Self {
        NetState {
            b1: BlockState::zeros(ring_len),
            b2: BlockState::zeros(ring_len),
        }
    }
}

/// Learnable parameters of the hybrid optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridParams {
    pub eta_adam: f64,
    pub eta_rms: f64,
    pub eta_net: f64,
    pub net: SpatioTemporalNet,
    /// Log of the Gaussian exploration std used during training only.
    pub exploration_log_std: f64,
}

impl HybridParams {
    /// Zero network with the learned learning rates 0.0223, 0.0221, 0.0645:
    /// already a sane Adam+RMSProp blend before any training.
    pub fn learned_default() -> Self {
        HybridParams {
            eta_adam: 0.0223,
            eta_rms: 0.0221,
            eta_net: 0.0645,
            net: SpatioTemporalNet::zeros(),
            exploration_log_std: (0.02f64).ln(),
        }
    }

    /// Random network initialization for training: fan-in scaled weights and
    /// the customary forget-gate bias of 1.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::learned_default();
        let init_conv = |conv: &mut Conv1d, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, (2.0 / (conv.in_ch as f64 * 3.0)).sqrt()).unwrap();
            for w in &mut conv.weight {
                *w = dist.sample(rng);
            }
        };
        let init_lstm = |lstm: &mut LstmCell, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, (1.0 / DIM as f64).sqrt()).unwrap();
            for w in lstm.w.iter_mut().chain(lstm.u.iter_mut()) {
                *w = dist.sample(rng);
            }
            for r in 0..DIM {
                lstm.b[DIM + r] = 1.0; // forget gate
            }
        };
        init_conv(&mut p.net.block1.conv, &mut rng);
        init_lstm(&mut p.net.block1.lstm, &mut rng);
        init_conv(&mut p.net.block2.conv, &mut rng);
        init_lstm(&mut p.net.block2.lstm, &mut rng);
        init_conv(&mut p.net.head, &mut rng);
        p
    }

    pub fn param_count(&self) -> usize {
        4 + net_param_count(&self.net)
    }

    /// Flat layout: the three learning rates, the exploration log-std, then
    /// the network parameters block by block.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.push(self.eta_adam);
        out.push(self.eta_rms);
        out.push(self.eta_net);
        out.push(self.exploration_log_std);
        for block in [&self.net.block1, &self.net.block2] {
            out.extend_from_slice(&block.conv.weight);
            out.extend_from_slice(&block.conv.bias);
            out.extend_from_slice(&block.lstm.w);
            out.extend_from_slice(&block.lstm.u);
            out.extend_from_slice(&block.lstm.b);
        }
        out.extend_from_slice(&self.net.head.weight);
        out.extend_from_slice(&self.net.head.bias);
        out
    }

    /// Inverse of [`flatten`].
    pub fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter count mismatch");
        self.eta_adam = flat[0];
        self.eta_rms = flat[1];
        self.eta_net = flat[2];
        self.exploration_log_std = flat[3];
        let mut k = 4;
        let take = |dst: &mut [f64], k: &mut usize| {
            dst.copy_from_slice(&flat[*k..*k + dst.len()]);
            *k += dst.len();
        };
        for block in [&mut self.net.block1, &mut self.net.block2] {
            take(&mut block.conv.weight, &mut k);
            take(&mut block.conv.bias, &mut k);
            take(&mut block.lstm.w, &mut k);
            take(&mut block.lstm.u, &mut k);
            take(&mut block.lstm.b, &mut k);
        }
        take(&mut self.net.head.weight, &mut k);
        take(&mut self.net.head.bias, &mut k);
    }
}

fn net_param_count(net: &SpatioTemporalNet) -> usize {
    let block = |b: &TemporalConvBlock| {
        b.conv.weight.len() + b.conv.bias.len() + b.lstm.w.len() + b.lstm.u.len() + b.lstm.b.len()
    };
    block(&net.block1) + block(&net.block2) + net.head.weight.len() + net.head.bias.len()
}

/// Everything one block forward retains for backpropagation.
struct BlockCache {
    /// Conv input, channel-major `in_ch x l`.
    x: Vec<f64>,
    /// Conv pre-activation, `DIM x l`.
    z: Vec<f64>,
    /// States entering the step, position-major `l x DIM`.
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gates per position, `l x 4 x DIM` (i, f, g, o).
    gates: Vec<f64>,
    /// `tanh(c_new)` per position, `l x DIM`.
    tanh_c: Vec<f64>,
}

/// One block forward step: advances the state and returns the channel-major
/// output (the new hidden values).
fn block_forward(
    block: &TemporalConvBlock,
    l: usize,
    x: &[f64],
    state: &mut BlockState,
    with_cache: bool,
) -> (Vec<f64>, Option<BlockCache>) {
    let z = block.conv.forward(l, x);
    let a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();

    let mut out = vec![0.0; DIM * l];
    let mut cache = with_cache.then(|| BlockCache {
        x: x.to_vec(),
        z: z.clone(),
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        gates: vec![0.0; l * 4 * DIM],
        tanh_c: vec![0.0; l * DIM],
    });

    for p in 0..l {
        // gather the per-position input vector from the channel-major conv
        // activations
        let mut xp = [0.0; DIM];
        for ch in 0..DIM.min(block.conv.out_ch) {
            xp[ch] = a[ch * l + p];
        }
        let h_prev = &state.h[p * DIM..(p + 1) * DIM];
        let c_prev = &state.c[p * DIM..(p + 1) * DIM];

        let mut gate_pre = [0.0; 4 * DIM];
        for gate in 0..4 {
            for r in 0..DIM {
                let mut acc = block.lstm.b[gate * DIM + r];
                let wrow = (gate * DIM + r) * DIM;
                for col in 0..DIM {
                    acc += block.lstm.w[wrow + col] * xp[col]
                        + block.lstm.u[wrow + col] * h_prev[col];
                }
                gate_pre[gate * DIM + r] = acc;
            }
        }
        let mut h_new = [0.0; DIM];
        let mut c_new = [0.0; DIM];
        for r in 0..DIM {
            let i = sigmoid(gate_pre[r]);
            let f = sigmoid(gate_pre[DIM + r]);
            let g = gate_pre[2 * DIM + r].tanh();
            let o = sigmoid(gate_pre[3 * DIM + r]);
            let c = f * c_prev[r] + i * g;
            let tc = c.tanh();
            c_new[r] = c;
            h_new[r] = o * tc;
            if let Some(cache) = cache.as_mut() {
                let gb = p * 4 * DIM;
                cache.gates[gb + r] = i;
                cache.gates[gb + DIM + r] = f;
                cache.gates[gb + 2 * DIM + r] = g;
                cache.gates[gb + 3 * DIM + r] = o;
                cache.tanh_c[p * DIM + r] = tc;
            }
        }
        for r in 0..DIM {
            state.h[p * DIM + r] = h_new[r];
            state.c[p * DIM + r] = c_new[r];
            out[r * l + p] = h_new[r];
        }
    }
    (out, cache)
}

/// Parameter gradients of one block (same shapes as the block).
struct BlockGrad {
    conv: Conv1d,
    lstm_w: Vec<f64>,
    lstm_u: Vec<f64>,
    lstm_b: Vec<f64>,
}

impl BlockGrad {
    fn zeros(in_ch: usize) -> Self {
        BlockGrad {
            conv: Conv1d::zeros(in_ch, DIM),
            lstm_w: vec![0.0; 4 * DIM * DIM],
            lstm_u: vec![0.0; 4 * DIM * DIM],
            lstm_b: vec![0.0; 4 * DIM],
        }
    }
}

/// Backward through one block step. `d_out` is the channel-major gradient on
/// the block output; `d_h_next`/`d_c_next` carry the recurrence gradient
/// arriving from the following time step (position-major). Returns the
/// gradient on the conv input and the recurrence gradients for the previous
/// time step.
#[allow(clippy::too_many_arguments)]
fn block_backward(
    block: &TemporalConvBlock,
    l: usize,
    cache: &BlockCache,
    d_out: &[f64],
    d_h_next: &[f64],
    d_c_next: &[f64],
    grad: &mut BlockGrad,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d_a = vec![0.0; DIM * l]; // gradient on conv activations
    let mut d_h_prev = vec![0.0; l * DIM];
    let mut d_c_prev = vec![0.0; l * DIM];

    for p in 0..l {
        let gb = p * 4 * DIM;
        let mut dz = [0.0; 4 * DIM];
        for r in 0..DIM {
            let i = cache.gates[gb + r];
            let f = cache.gates[gb + DIM + r];
            let g = cache.gates[gb + 2 * DIM + r];
            let o = cache.gates[gb + 3 * DIM + r];
            let tc = cache.tanh_c[p * DIM + r];
            let dh = d_out[r * l + p] + d_h_next[p * DIM + r];
            let dc_total = d_c_next[p * DIM + r] + dh * o * (1.0 - tc * tc);
            let d_o = dh * tc;
            let d_i = dc_total * g;
            let d_f = dc_total * cache.c_prev[p * DIM + r];
            let d_g = dc_total * i;
            d_c_prev[p * DIM + r] = dc_total * f;
            dz[r] = d_i * i * (1.0 - i);
            dz[DIM + r] = d_f * f * (1.0 - f);
            dz[2 * DIM + r] = d_g * (1.0 - g * g);
            dz[3 * DIM + r] = d_o * o * (1.0 - o);
        }
        // parameter and input gradients of the shared cell
        let mut xp = [0.0; DIM];
        for ch in 0..DIM {
            xp[ch] = cache.z[ch * l + p].max(0.0);
        }
        let h_prev = &cache.h_prev[p * DIM..(p + 1) * DIM];
        for gate in 0..4 {
            for r in 0..DIM {
                let d = dz[gate * DIM + r];
                if d == 0.0 {
                    continue;
                }
                grad.lstm_b[gate * DIM + r] += d;
                let wrow = (gate * DIM + r) * DIM;
                for col in 0..DIM {
                    grad.lstm_w[wrow + col] += d * xp[col];
                    grad.lstm_u[wrow + col] += d * h_prev[col];
                    d_a[col * l + p] += d * block.lstm.w[wrow + col];
                    d_h_prev[p * DIM + col] += d * block.lstm.u[wrow + col];
                }
            }
        }
    }

    // ReLU gate, then conv backward
    let mut dz_conv = d_a;
    for (d, z) in dz_conv.iter_mut().zip(&cache.z) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
    let (conv_grad, d_x) = block.conv.backward(l, &cache.x, &dz_conv);
    for (acc, g) in grad.conv.weight.iter_mut().zip(&conv_grad.weight) {
        *acc += g;
    }
    for (acc, g) in grad.conv.bias.iter_mut().zip(&conv_grad.bias) {
        *acc += g;
    }
    (d_x, d_h_prev, d_c_prev)
}

/// Per-step retained tensors of a full network forward. The conv inputs live
/// inside the block caches.
struct NetStepCache {
    b1: BlockCache,
    b2: BlockCache,
    z_head: Vec<f64>, // 1 x l pre-activation
    b2_out: Vec<f64>, // DIM x l
}

/// Network forward on a gradient ring: builds the (g, g^2, g^3) channels,
/// runs both blocks and the head, returns the non-negative magnitudes.
fn net_forward(
    net: &SpatioTemporalNet,
    state: &mut NetState,
    g_ring: &[f64],
    with_cache: bool,
) -> (Vec<f64>, Option<NetStepCache>) {
    let l = g_ring.len();
    let mut input = vec![0.0; IN_CH * l];
    for (p, &g) in g_ring.iter().enumerate() {
        input[p] = g;
        input[l + p] = g * g;
        input[2 * l + p] = g * g * g;
    }
    let (out1, c1) = block_forward(&net.block1, l, &input, &mut state.b1, with_cache);
    let (out2, c2) = block_forward(&net.block2, l, &out1, &mut state.b2, with_cache);
    let z_head = net.head.forward(l, &out2);
    let m: Vec<f64> = z_head.iter().map(|&v| v.max(0.0)).collect();
    // closed-form kernel estimate: conv + lstm per block, head, channels
    flops::add(
        Category::Optimizer,
        ((6 * IN_CH * DIM + 6 * DIM * DIM + 2 * (16 * DIM * DIM + 10 * DIM) + 6 * DIM) * l) as u64,
    );
    let cache = match (c1, c2) {
        (Some(b1), Some(b2)) => Some(NetStepCache {
            b1,
            b2,
            z_head,
            b2_out: out2,
        }),
        _ => None,
    };
    (m, cache)
}

/// The network direction for a boundary gradient: magnitude times sign,
/// advancing the recurrent state.
pub fn net_direction(
    net: &SpatioTemporalNet,
    state: &mut NetState,
    g: &BoundaryValues,
) -> BoundaryValues {
    let ring = as_ring(g);
    let (m, _) = net_forward(net, state, &ring, false);
    let dir: Vec<f64> = m.iter().zip(&ring).map(|(m, g)| m * sign(*g)).collect();
    from_ring(g.grid(), &dir)
}

/// Mean absolute update contribution of each component over one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContributionRecord {
    pub adam: f64,
    pub rms: f64,
    pub net: f64,
}

/// Mutable per-run state: the two moment estimators plus the recurrent
/// network state.
#[derive(Debug, Clone)]
pub struct HybridState {
    pub adam: AdamState,
    pub rms: RmsPropState,
    pub net: NetState,
}

impl HybridState {
    pub fn new(grid: Grid) -> Self {
        let l = grid.boundary_len();
        HybridState {
            adam: AdamState::new(l),
            rms: RmsPropState::new(l),
            net: NetState::zeros(l),
        }
    }
}

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

/// One hybrid update: blend the three directions at the current gradient and
/// step the control. Returns the new control, the cost at the *input*
/// control, and the contribution record.
pub fn hybrid_step(
    problem: &Problem,
    u: &BoundaryValues,
    state: &mut HybridState,
    params: &HybridParams,
    cfg: &CostConfig,
) -> Result<(BoundaryValues, CostBreakdown, ContributionRecord)> {
    let (breakdown, grad) = cost::evaluate_with_gradient(problem, u, cfg)?;
    let g_ring = as_ring(&grad);
    let d_adam = adam_direction(&mut state.adam, &g_ring);
    let d_rms = rmsprop_direction(&mut state.rms, &g_ring);
    let (m, _) = net_forward(&params.net, &mut state.net, &g_ring, false);
    let d_net: Vec<f64> = m.iter().zip(&g_ring).map(|(m, g)| m * sign(*g)).collect();

    let mut ring = as_ring(u);
    let mut ca = vec![0.0; ring.len()];
    let mut cr = vec![0.0; ring.len()];
    let mut cn = vec![0.0; ring.len()];
    for k in 0..ring.len() {
        ca[k] = params.eta_adam * d_adam[k];
        cr[k] = params.eta_rms * d_rms[k];
        cn[k] = params.eta_net * d_net[k];
        ring[k] -= ca[k] + cr[k] + cn[k];
    }
    flops::add(Category::Optimizer, 8 * ring.len() as u64);
    Ok((
        from_ring(problem.grid, &ring),
        breakdown,
        ContributionRecord {
            adam: mean_abs(&ca),
            rms: mean_abs(&cr),
            net: mean_abs(&cn),
        },
    ))
}

/// Result of a hybrid optimization run.
#[derive(Debug, Clone)]
pub struct HybridRun {
    /// Objective per iteration: entry 0 is the initial guess, entry `t` the
    /// control after `t` updates.
    pub trace: Vec<CostBreakdown>,
    /// One record per completed update.
    pub contributions: Vec<ContributionRecord>,
    pub best_u: BoundaryValues,
    pub best_cost: f64,
    /// Index into `trace` of the best control.
    pub best_iteration: usize,
    /// Set when a solver failure cut the run short.
    pub aborted: Option<String>,
}

/// Run the hybrid optimizer from a fresh state for `iters` updates.
pub fn run(
    problem: &Problem,
    params: &HybridParams,
    strategy: &GuessStrategy,
    iters: usize,
    cfg: &CostConfig,
) -> Result<HybridRun> {
    assert!(iters >= 1, "a run needs at least one iteration");
    let basis = source_basis(problem.grid)?;
    let mut u = guess(strategy, problem, &basis)?;
    let mut state = HybridState::new(problem.grid);

    let mut trace = Vec::with_capacity(iters + 1);
    let mut contributions = Vec::with_capacity(iters);
    let mut best_u = u.clone();
    let mut best_cost = f64::INFINITY;
    let mut best_iteration = 0;
    let mut aborted = None;

    for iter in 0..=iters {
        let result = if iter < iters {
            hybrid_step(problem, &u, &mut state, params, cfg)
                .map(|(u_next, b, c)| (Some((u_next, c)), b))
        } else {
            cost::evaluate(problem, &u, cfg).map(|b| (None, b))
        };
        let (advance, breakdown) = match result {
            Ok(pair) => pair,
            Err(Error::SolverFailure {
                iterations,
                residual,
                tolerance,
            }) => {
                aborted = Some(format!(
                    "solver failed at iteration {iter}: {iterations} iterations, \
                     residual {residual:.3e} vs tolerance {tolerance:.3e}"
                ));
                break;
            }
            Err(e) => return Err(e),
        };
        trace.push(breakdown);
        if breakdown.f < best_cost {
            best_cost = breakdown.f;
            best_u = u.clone();
            best_iteration = iter;
        }
        if let Some((u_next, contrib)) = advance {
            contributions.push(contrib);
            u = u_next;
        }
    }

    Ok(HybridRun {
        trace,
        contributions,
        best_u,
        best_cost,
        best_iteration,
        aborted,
    })
}

/// Net-output constancy probe: runs the optimizer and reports, for every
/// iteration after the first, the mean absolute deviation of the head
/// magnitudes from the first iteration's magnitudes.
pub fn probe_net_output_variation(
    params: &HybridParams,
    problem: &Problem,
    iters: usize,
    cfg: &CostConfig,
) -> Result<Vec<f64>> {
    assert!(iters >= 2, "the probe compares against the first iteration");
    let basis = source_basis(problem.grid)?;
    let mut u = guess(&GuessStrategy::Mean, problem, &basis)?;
    let mut state = HybridState::new(problem.grid);
    let mut first: Option<Vec<f64>> = None;
    let mut deviations = Vec::with_capacity(iters - 1);

    for _ in 0..iters {
        let (_, grad) = cost::evaluate_with_gradient(problem, &u, cfg)?;
        let g_ring = as_ring(&grad);
        let d_adam = adam_direction(&mut state.adam, &g_ring);
        let d_rms = rmsprop_direction(&mut state.rms, &g_ring);
        let (m, _) = net_forward(&params.net, &mut state.net, &g_ring, false);
        match &first {
            None => first = Some(m.clone()),
            Some(m1) => deviations.push(
                m.iter()
                    .zip(m1)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / m.len() as f64,
            ),
        }
        let mut ring = as_ring(&u);
        for k in 0..ring.len() {
            let d_net = m[k] * sign(g_ring[k]);
            ring[k] -=
                params.eta_adam * d_adam[k] + params.eta_rms * d_rms[k] + params.eta_net * d_net;
        }
        u = from_ring(problem.grid, &ring);
    }
    Ok(deviations)
}

/// Frozen inputs and drawn actions of one training episode.
pub struct EpisodeTape {
    /// Boundary-gradient rings per step (environment inputs, not
    /// differentiated).
    pub gs: Vec<Vec<f64>>,
    /// Adam directions per step, recomputed deterministically from `gs`.
    pub d_adams: Vec<Vec<f64>>,
    /// RMSProp directions per step.
    pub d_rms: Vec<Vec<f64>>,
    /// Actions actually applied to the control (`u_{t+1} = u_t + a_t`).
    pub actions: Vec<Vec<f64>>,
}

/// Network-dependent quantities of an episode replay.
struct Replay {
    caches: Vec<NetStepCache>,
    mus: Vec<Vec<f64>>,
    d_nets: Vec<Vec<f64>>,
}

fn replay_net(params: &HybridParams, tape: &EpisodeTape) -> Replay {
    let l = tape.gs[0].len();
    let mut state = NetState::zeros(l);
    let mut caches = Vec::with_capacity(tape.gs.len());
    let mut mus = Vec::with_capacity(tape.gs.len());
    let mut d_nets = Vec::with_capacity(tape.gs.len());
    for (t, g_ring) in tape.gs.iter().enumerate() {
        let (m, cache) = net_forward(&params.net, &mut state, g_ring, true);
        let d_net: Vec<f64> = m.iter().zip(g_ring).map(|(m, g)| m * sign(*g)).collect();
        let mu: Vec<f64> = (0..l)
            .map(|k| {
                -(params.eta_adam * tape.d_adams[t][k]
                    + params.eta_rms * tape.d_rms[t][k]
                    + params.eta_net * d_net[k])
            })
            .collect();
        caches.push(cache.unwrap());
        mus.push(mu);
        d_nets.push(d_net);
    }
    Replay {
        caches,
        mus,
        d_nets,
    }
}

/// Sum over the episode of the Gaussian log-density of each action under the
/// policy mean (the deterministic hybrid update) and std
/// `exp(exploration_log_std)`. Deterministic in its inputs; used as the
/// finite-difference oracle target for the analytic gradient.
pub fn episode_log_density(params: &HybridParams, tape: &EpisodeTape) -> f64 {
    let replay = replay_net(params, tape);
    let sigma = params.exploration_log_std.exp();
    let l = tape.gs[0].len() as f64;
    let mut total = 0.0;
    for (t, mu) in replay.mus.iter().enumerate() {
        let sq: f64 = tape.actions[t]
            .iter()
            .zip(mu)
            .map(|(a, m)| (a - m) * (a - m))
            .sum();
        total += -l * params.exploration_log_std
            - 0.5 * l * (2.0 * std::f64::consts::PI).ln()
            - sq / (2.0 * sigma * sigma);
    }
    total
}

/// Analytic gradient of a weighted sum of per-step log-densities,
/// backpropagated through the network chain including the recurrent states.
/// `step_weights[t]` scales step `t`'s log-density (all ones recovers the
/// gradient of [`episode_log_density`]); the REINFORCE update uses the
/// advantages as weights. Returns the weighted log-density value and the
/// gradient in [`HybridParams::flatten`] layout.
pub fn episode_log_density_grad(
    params: &HybridParams,
    tape: &EpisodeTape,
    step_weights: &[f64],
) -> (f64, Vec<f64>) {
    let t_len = tape.gs.len();
    assert_eq!(step_weights.len(), t_len, "one weight per step");
    let l = tape.gs[0].len();
    let replay = replay_net(params, tape);
    let sigma = params.exploration_log_std.exp();
    let inv_s2 = 1.0 / (sigma * sigma);

    let mut value = 0.0;
    let mut g_eta_adam = 0.0;
    let mut g_eta_rms = 0.0;
    let mut g_eta_net = 0.0;
    let mut g_log_std = 0.0;
    let mut gb1 = BlockGrad::zeros(IN_CH);
    let mut gb2 = BlockGrad::zeros(DIM);
    let mut g_head = Conv1d::zeros(DIM, 1);

    // recurrence gradients flowing backwards in time
    let mut d_h1 = vec![0.0; l * DIM];
    let mut d_c1 = vec![0.0; l * DIM];
    let mut d_h2 = vec![0.0; l * DIM];
    let mut d_c2 = vec![0.0; l * DIM];

    for t in (0..t_len).rev() {
        let w = step_weights[t];
        let mu = &replay.mus[t];
        let cache = &replay.caches[t];
        let mut sq = 0.0;
        let mut d_mu = vec![0.0; l];
        for k in 0..l {
            let e = tape.actions[t][k] - mu[k];
            sq += e * e;
            d_mu[k] = w * e * inv_s2;
        }
        value += w
            * (-(l as f64) * params.exploration_log_std
                - 0.5 * l as f64 * (2.0 * std::f64::consts::PI).ln()
                - sq * inv_s2 / 2.0);
        g_log_std += w * (-(l as f64) + sq * inv_s2);

        for k in 0..l {
            g_eta_adam -= d_mu[k] * tape.d_adams[t][k];
            g_eta_rms -= d_mu[k] * tape.d_rms[t][k];
            g_eta_net -= d_mu[k] * replay.d_nets[t][k];
        }

        // through the magnitude: mu = ... - eta_net * m * sign(g)
        let mut dz_head = vec![0.0; l];
        for k in 0..l {
            if cache.z_head[k] > 0.0 {
                dz_head[k] = -params.eta_net * d_mu[k] * sign(tape.gs[t][k]);
            }
        }
        let (head_grad, d_b2_out) = params.net.head.backward(l, &cache.b2_out, &dz_head);
        for (acc, g) in g_head.weight.iter_mut().zip(&head_grad.weight) {
            *acc += g;
        }
        for (acc, g) in g_head.bias.iter_mut().zip(&head_grad.bias) {
            *acc += g;
        }

        let (d_out1, d_h2_prev, d_c2_prev) = block_backward(
            &params.net.block2,
            l,
            &cache.b2,
            &d_b2_out,
            &d_h2,
            &d_c2,
            &mut gb2,
        );
        d_h2 = d_h2_prev;
        d_c2 = d_c2_prev;

        let (_d_input, d_h1_prev, d_c1_prev) = block_backward(
            &params.net.block1,
            l,
            &cache.b1,
            &d_out1,
            &d_h1,
            &d_c1,
            &mut gb1,
        );
        d_h1 = d_h1_prev;
        d_c1 = d_c1_prev;
    }

    let grads = HybridParams {
        eta_adam: g_eta_adam,
        eta_rms: g_eta_rms,
        eta_net: g_eta_net,
        exploration_log_std: g_log_std,
        net: SpatioTemporalNet {
            block1: TemporalConvBlock {
                conv: gb1.conv,
                lstm: LstmCell {
                    w: gb1.lstm_w,
                    u: gb1.lstm_u,
                    b: gb1.lstm_b,
                },
            },
            block2: TemporalConvBlock {
                conv: gb2.conv,
                lstm: LstmCell {
                    w: gb2.lstm_w,
                    u: gb2.lstm_u,
                    b: gb2.lstm_b,
                },
            },
            head: g_head,
        },
    };
    (value, grads.flatten())
}

/// Configuration of the policy-gradient trainer.
#[derive(Debug, Clone)]
pub struct PolicyTrainConfig {
    /// Total episodes to roll out.
    pub episodes: usize,
    /// Steps per episode.
    pub horizon: usize,
    /// Ascent step size on the flattened parameters.
    pub lr: f64,
    /// Episodes per parameter update.
    pub batch: usize,
    /// Seed of the exploration noise.
    pub seed: u64,
    /// Use the final reward for every step's return instead of reward-to-go.
    pub final_cost_return: bool,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            episodes: 200,
            horizon: 8,
            lr: 0.01,
            batch: 8,
            seed: 0,
            final_cost_return: false,
        }
    }
}

/// Outcome of policy-gradient training.
#[derive(Debug, Clone)]
pub struct PolicyTrainReport {
    /// Parameters with the lowest validation mean best-cost; the initial
    /// parameters are a candidate.
    pub params: HybridParams,
    /// Validation mean best-cost per candidate (entry 0 = initial params).
    pub val_costs: Vec<f64>,
    pub best_index: usize,
    /// Episode returns in rollout order.
    pub returns: Vec<f64>,
}

fn validation_cost(params: &HybridParams, val: &[Problem], horizon: usize) -> Result<f64> {
    let mut total = 0.0;
    for p in val {
        let cfg = CostConfig::for_grid(p.grid);
        let r = run(p, params, &GuessStrategy::Mean, horizon, &cfg)?;
        total += r.best_cost;
    }
    Ok(total / val.len() as f64)
}

/// REINFORCE training of the hybrid optimizer. Episodes cycle through the
/// training problems; each rolls out `horizon` noisy updates from the mean
/// guess, with per-step reward `-F(u_{t+1})`. Returns use reward-to-go (or
/// the final reward under the flag) minus a per-step-index moving-average
/// baseline; gradients flow through the network chain only. The returned
/// parameters are the validation-best checkpoint.
pub fn train_policy_gradient(
    params0: &HybridParams,
    train: &[Problem],
    val: &[Problem],
    tcfg: &PolicyTrainConfig,
) -> Result<PolicyTrainReport> {
    assert!(tcfg.horizon >= 1, "horizon must be at least 1");
    assert!(!train.is_empty() && !val.is_empty(), "empty split");
    let mut params = params0.clone();
    let mut flat = params.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);

    let mut val_costs = vec![validation_cost(&params, val, tcfg.horizon)?];
    let mut best = (0usize, val_costs[0], params.clone());
    let mut returns = Vec::with_capacity(tcfg.episodes);

    // per-step-index moving-average baseline, initialized on first sight
    let mut baseline: Vec<Option<f64>> = vec![None; tcfg.horizon];
    let mut grad_acc = vec![0.0; flat.len()];
    let mut in_batch = 0usize;

    for episode in 0..tcfg.episodes {
        let problem = &train[episode % train.len()];
        let cfg = CostConfig::for_grid(problem.grid);
        let sigma = params.exploration_log_std.exp();

        // roll out one episode
        let basis = source_basis(problem.grid)?;
        let mut u = guess(&GuessStrategy::Mean, problem, &basis)?;
        let mut state = HybridState::new(problem.grid);
        let l = problem.grid.boundary_len();
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut tape = EpisodeTape {
            gs: Vec::with_capacity(tcfg.horizon),
            d_adams: Vec::with_capacity(tcfg.horizon),
            d_rms: Vec::with_capacity(tcfg.horizon),
            actions: Vec::with_capacity(tcfg.horizon),
        };
        let mut rewards = Vec::with_capacity(tcfg.horizon);
        for _ in 0..tcfg.horizon {
            let (_, grad) = cost::evaluate_with_gradient(problem, &u, &cfg)?;
            let g_ring = as_ring(&grad);
            let d_adam = adam_direction(&mut state.adam, &g_ring);
            let d_rms = rmsprop_direction(&mut state.rms, &g_ring);
            let (m, _) = net_forward(&params.net, &mut state.net, &g_ring, false);
            let mut action = vec![0.0; l];
            let mut ring = as_ring(&u);
            for k in 0..l {
                let d_net = m[k] * sign(g_ring[k]);
                let mu = -(params.eta_adam * d_adam[k]
                    + params.eta_rms * d_rms[k]
                    + params.eta_net * d_net);
                action[k] = mu + sigma * noise.sample(&mut rng);
                ring[k] += action[k];
            }
            u = from_ring(problem.grid, &ring);
            rewards.push(-cost::evaluate(problem, &u, &cfg)?.f);
            tape.gs.push(g_ring);
            tape.d_adams.push(d_adam);
            tape.d_rms.push(d_rms);
            tape.actions.push(action);
        }

        // returns and advantages
        let mut g_t = vec![0.0; tcfg.horizon];
        if tcfg.final_cost_return {
            let last = *rewards.last().unwrap();
            g_t.fill(last);
        } else {
            let mut acc = 0.0;
            for t in (0..tcfg.horizon).rev() {
                acc += rewards[t];
                g_t[t] = acc;
            }
        }
        let episode_return = g_t[0];
        if !episode_return.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "non-finite return in episode {episode}"
            )));
        }
        returns.push(episode_return);
        let mut weights = vec![0.0; tcfg.horizon];
        for t in 0..tcfg.horizon {
            let b = baseline[t].unwrap_or(g_t[t]);
            weights[t] = g_t[t] - b;
            baseline[t] = Some(0.9 * b + 0.1 * g_t[t]);
        }

        if sigma > 0.0 {
            let (_, g) = episode_log_density_grad(&params, &tape, &weights);
            for (acc, gk) in grad_acc.iter_mut().zip(&g) {
                *acc += gk;
            }
        }
        in_batch += 1;

        if in_batch == tcfg.batch || episode + 1 == tcfg.episodes {
            let scale = 1.0 / in_batch as f64;
            let mut norm = 0.0;
            for g in &mut grad_acc {
                *g *= scale;
                norm += *g * *g;
            }
            let norm = norm.sqrt();
            if !norm.is_finite() {
                return Err(Error::TrainingDiverged("non-finite policy gradient".into()));
            }
            let clip = if norm > 1.0 { 1.0 / norm } else { 1.0 };
            for (p, g) in flat.iter_mut().zip(&grad_acc) {
                *p += tcfg.lr * clip * g;
            }
            params.assign(&flat);
            grad_acc.fill(0.0);
            in_batch = 0;

            let vc = validation_cost(&params, val, tcfg.horizon)?;
            val_costs.push(vc);
            if vc < best.1 {
                best = (val_costs.len() - 1, vc, params.clone());
            }
        }
    }

    Ok(PolicyTrainReport {
        params: best.2,
        val_costs,
        best_index: best.0,
        returns,
    })
}
