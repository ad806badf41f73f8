//! Explicit floating-point operation counters.
//!
//! Kernels increment these global counters with closed-form per-call costs,
//! which makes the counts exactly reproducible across runs and platforms
//! (unlike hardware counters). The benchmark commands snapshot the counters
//! around each phase and report differences.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// Conjugate-gradient and stencil kernels.
    Solver,
    /// Cost, barrier and gradient assembly.
    Cost,
    /// 2-D convolution stack of the initial-guess network.
    Guess,
    /// Adam/RMSProp updates and the spatio-temporal network.
    Optimizer,
}

static SOLVER: AtomicU64 = AtomicU64::new(0);
static COST: AtomicU64 = AtomicU64::new(0);
static GUESS: AtomicU64 = AtomicU64::new(0);
static OPTIMIZER: AtomicU64 = AtomicU64::new(0);

fn cell(cat: Category) -> &'static AtomicU64 {
    match cat {
        Category::Solver => &SOLVER,
        Category::Cost => &COST,
        Category::Guess => &GUESS,
        Category::Optimizer => &OPTIMIZER,
    }
}

pub fn add(cat: Category, count: u64) {
    cell(cat).fetch_add(count, Ordering::Relaxed);
}

/// Point-in-time totals since process start (or the last [`reset`]).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounts {
    pub solver: u64,
    pub cost: u64,
    pub guess: u64,
    pub optimizer: u64,
}

impl FlopCounts {
    pub fn total(&self) -> u64 {
        self.solver + self.cost + self.guess + self.optimizer
    }

    /// Componentwise difference `self - earlier`.
    pub fn since(&self, earlier: &FlopCounts) -> FlopCounts {
        FlopCounts {
            solver: self.solver - earlier.solver,
            cost: self.cost - earlier.cost,
            guess: self.guess - earlier.guess,
            optimizer: self.optimizer - earlier.optimizer,
        }
    }
}

pub fn snapshot() -> FlopCounts {
    FlopCounts {
        solver: SOLVER.load(Ordering::Relaxed),
        cost: COST.load(Ordering::Relaxed),
        guess: GUESS.load(Ordering::Relaxed),
        optimizer: OPTIMIZER.load(Ordering::Relaxed),
    }
}

pub fn reset() {
    SOLVER.store(0, Ordering::Relaxed);
    COST.store(0, Ordering::Relaxed);
    GUESS.store(0, Ordering::Relaxed);
    OPTIMIZER.store(0, Ordering::Relaxed);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_diff() {
        let before = snapshot();
        add(Category::Solver, 100);
        add(Category::Guess, 7);
        let after = snapshot();
        let d = after.since(&before);
        assert!(d.solver >= 100);
        assert!(d.guess >= 7);
        assert_eq!(d.total(), d.solver + d.cost + d.guess + d.optimizer);
    }
}
