//! Core geometric types: the square grid, interior fields and boundary data.
//!
//! The domain is the unit square discretized with `n` interior points per
//! side and mesh spacing `h = 1/(n+1)`. Interior node `(i, j)` sits at
//! `(x1, x2) = ((j+1)h, (i+1)h)`, i.e. columns run along `x1` and rows along
//! `x2`. Boundary data lives on the four edges of the surrounding ring and
//! never includes the ring corners, which the 5-point stencil never reads;
//! the control therefore has exactly `4n` degrees of freedom.

use crate::error::{Error, Result};

/// Square-domain discretization: `n` interior points per side on the unit
/// square, spacing `h = 1/(n+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    n: usize,
}

impl Grid {
    /// A grid with `n >= 1` interior points per side.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "grid needs at least one interior point");
        Self { n }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Mesh spacing on the unit square.
    pub fn h(&self) -> f64 {
        1.0 / (self.n as f64 + 1.0)
    }

    /// Coordinate of interior index `k` along either axis: `(k+1)*h`.
    pub fn coord(&self, k: usize) -> f64 {
        (k as f64 + 1.0) * self.h()
    }

    /// Number of interior nodes, `n^2`.
    pub fn interior_len(&self) -> usize {
        self.n * self.n
    }

    /// Number of boundary control values, `4n`.
    pub fn boundary_len(&self) -> usize {
        4 * self.n
    }
}

/// An `n x n` scalar field over the interior nodes, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainField {
    grid: Grid,
    values: Vec<f64>,
}

impl DomainField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.interior_len(), "field shape mismatch");
        Self { grid, values }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::new(grid, vec![0.0; grid.interior_len()])
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self::new(grid, vec![value; grid.interior_len()])
    }

    /// Sample `f(x1, x2)` at every interior node.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.n();
        let mut values = Vec::with_capacity(grid.interior_len());
        for i in 0..n {
            let x2 = grid.coord(i);
            for j in 0..n {
                let x1 = grid.coord(j);
                values.push(f(x1, x2));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.values[i * self.grid.n + j] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Median; the average of the two central order statistics for even counts.
    pub fn median(&self) -> f64 {
        let mut sorted = self.values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = sorted.len();
        if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        }
    }

    pub fn max_abs_diff(&self, other: &DomainField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// The boundary control `u`: four edges of `n` values each, corners excluded.
///
/// `top[j]` is the Dirichlet value adjacent to interior node `(0, j)`,
/// `bottom[j]` to `(n-1, j)`, `left[i]` to `(i, 0)` and `right[i]` to
/// `(i, n-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryValues {
    grid: Grid,
    pub top: Vec<f64>,
    pub bottom: Vec<f64>,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl BoundaryValues {
    pub fn new(grid: Grid, top: Vec<f64>, bottom: Vec<f64>, left: Vec<f64>, right: Vec<f64>) -> Self {
        let n = grid.n();
        assert!(
            top.len() == n && bottom.len() == n && left.len() == n && right.len() == n,
            "each edge must have exactly n entries"
        );
        Self {
            grid,
            top,
            bottom,
            left,
            right,
        }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        let n = grid.n();
        Self {
            grid,
            top: vec![value; n],
            bottom: vec![value; n],
            left: vec![value; n],
            right: vec![value; n],
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().map(f64::abs).fold(0.0, f64::max)
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.top
            .iter()
            .chain(&self.bottom)
            .chain(&self.left)
            .chain(&self.right)
            .cloned()
    }

    pub fn max_abs_diff(&self, other: &BoundaryValues) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Canonical cyclic ordering of the `4n` boundary values: top left-to-right,
/// right top-to-bottom, bottom right-to-left, left bottom-to-top (clockwise
/// starting at the top-left). Adjacent ring entries are spatial neighbours,
/// which is what the circular convolutions downstream rely on.
pub fn as_ring(b: &BoundaryValues) -> Vec<f64> {
    let n = b.grid.n();
    let mut ring = Vec::with_capacity(4 * n);
    ring.extend_from_slice(&b.top);
    ring.extend_from_slice(&b.right);
    ring.extend(b.bottom.iter().rev());
    ring.extend(b.left.iter().rev());
    ring
}

/// Inverse of [`as_ring`].
pub fn from_ring(grid: Grid, ring: &[f64]) -> BoundaryValues {
    let n = grid.n();
    assert_eq!(ring.len(), 4 * n, "ring length must be 4n");
    let top = ring[..n].to_vec();
    let right = ring[n..2 * n].to_vec();
    let bottom: Vec<f64> = ring[2 * n..3 * n].iter().rev().cloned().collect();
    let left: Vec<f64> = ring[3 * n..4 * n].iter().rev().cloned().collect();
    BoundaryValues::new(grid, top, bottom, left, right)
}

/// Pull the outermost rows and columns of an interior field: top = row 0,
/// bottom = row n-1, left = column 0, right = column n-1. Corner entries of
/// the array appear in both a row edge and a column edge, giving exactly
/// `4n` values.
pub fn extract_edges(f: &DomainField) -> BoundaryValues {
    let n = f.grid().n();
    let mut top = Vec::with_capacity(n);
    let mut bottom = Vec::with_capacity(n);
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for j in 0..n {
        top.push(f.at(0, j));
        bottom.push(f.at(n - 1, j));
    }
    for i in 0..n {
        left.push(f.at(i, 0));
        right.push(f.at(i, n - 1));
    }
    BoundaryValues::new(f.grid(), top, bottom, left, right)
}

fn clamp_value(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Elementwise clamp of boundary data to `[lo, hi]`.
pub fn clamp_boundary(b: &BoundaryValues, lo: f64, hi: f64) -> Result<BoundaryValues> {
    if lo > hi {
        return Err(Error::InvalidBounds { lo, hi });
    }
    let map = |v: &[f64]| v.iter().map(|&x| clamp_value(x, lo, hi)).collect();
    Ok(BoundaryValues {
        grid: b.grid,
        top: map(&b.top),
        bottom: map(&b.bottom),
        left: map(&b.left),
        right: map(&b.right),
    })
}

/// Elementwise clamp of an interior field to `[lo, hi]`.
pub fn clamp_domain(f: &DomainField, lo: f64, hi: f64) -> Result<DomainField> {
    if lo > hi {
        return Err(Error::InvalidBounds { lo, hi });
    }
    let values = f.values().iter().map(|&x| clamp_value(x, lo, hi)).collect();
    Ok(DomainField::new(f.grid(), values))
}
