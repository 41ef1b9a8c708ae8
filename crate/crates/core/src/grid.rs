//! Uniform time grid on `J = [0, 1]`, node-sampled functions and the
//! composite trapezoid machinery shared by every other module.
//!
//! All integrals (running antiderivatives, history integrals over the
//! triangle `0 <= tau <= t <= 1`, and the three norms) use the same node set
//! and the same trapezoid weights, so discrete inner products and norms stay
//! mutually consistent.

use std::ops::{Add, Mul, Sub};

use rand::Rng;
use thiserror::Error;

/// Errors raised by grid construction and quadrature.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid needs at least 2 intervals, got {0}")]
    TooFewIntervals(usize),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("integrand is not finite at (t, tau) = ({t}, {tau})")]
    Evaluation { t: f64, tau: f64 },
}

/// Uniform grid `t_i = i / N`, `i = 0..=N`, with `N >= 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimeGrid {
    n_intervals: usize,
}

impl TimeGrid {
    pub fn new(n_intervals: usize) -> Result<Self, GridError> {
        if n_intervals < 2 {
            return Err(GridError::TooFewIntervals(n_intervals));
        }
        Ok(Self { n_intervals })
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    pub fn n_nodes(&self) -> usize {
        self.n_intervals + 1
    }

    pub fn step(&self) -> f64 {
        1.0 / self.n_intervals as f64
    }

    /// Node `t_i`. Computed as `i / N` so that `t_N == 1.0` exactly.
    pub fn node(&self, i: usize) -> f64 {
        i as f64 / self.n_intervals as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes()).map(move |i| self.node(i))
    }

    /// Composite trapezoid weight of node `i` on `[0, 1]`.
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i == self.n_intervals {
            0.5 * self.step()
        } else {
            self.step()
        }
    }

    /// Trapezoid weight of node `j` in the integral over `[0, t_i]`.
    /// Zero when `i == 0` or `j > i`.
    pub fn partial_weight(&self, i: usize, j: usize) -> f64 {
        if i == 0 || j > i {
            0.0
        } else if j == 0 || j == i {
            0.5 * self.step()
        } else {
            self.step()
        }
    }
}

/// A function `J -> R^dim` sampled at every node of a [`TimeGrid`].
///
/// Values are stored node-major: node `i` occupies
/// `values[i * dim..(i + 1) * dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self, GridError> {
        if dim == 0 {
            return Err(GridError::ZeroDimension);
        }
        let expected = grid.n_nodes() * dim;
        if values.len() != expected {
            return Err(GridError::LengthMismatch {
                expected,
                got: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { node: pos / dim });
        }
        Ok(Self { grid, dim, values })
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            grid,
            dim,
            values: vec![0.0; grid.n_nodes() * dim],
        }
    }

    /// The same vector at every node.
    pub fn constant(grid: TimeGrid, value: &[f64]) -> Self {
        Self::from_fn(grid, value.len(), |_, out| out.copy_from_slice(value))
    }

    /// Samples `f(t_i, out)` at every node. Panics if `f` writes a
    /// non-finite value; use [`GridFunction::new`] for fallible input.
    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(f64, &mut [f64])) -> Self {
        let mut g = Self::zeros(grid, dim);
        for i in 0..grid.n_nodes() {
            let t = grid.node(i);
            f(t, g.node_mut(i));
        }
        assert!(
            g.values.iter().all(|v| v.is_finite()),
            "sampled function is not finite"
        );
        g
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &GridFunction) {
        self.assert_compatible(other);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    /// Largest Euclidean node norm, `max_i |g(t_i)|`.
    pub fn max_norm(&self) -> f64 {
        (0..self.grid.n_nodes())
            .map(|i| euclid(self.node(i)))
            .fold(0.0, f64::max)
    }

    /// `max_i |self(t_i) - other(t_i)|`.
    pub fn max_distance(&self, other: &GridFunction) -> f64 {
        (self - other).max_norm()
    }

    fn assert_compatible(&self, other: &GridFunction) {
        assert_eq!(
            self.grid, other.grid,
            "grid functions live on different grids"
        );
        assert_eq!(
            self.dim, other.dim,
            "grid functions have different dimensions"
        );
    }
}

impl Add for &GridFunction {
    type Output = GridFunction;

    fn add(self, rhs: &GridFunction) -> GridFunction {
        let mut out = self.clone();
        out.axpy(1.0, rhs);
        out
    }
}

impl Sub for &GridFunction {
    type Output = GridFunction;

    fn sub(self, rhs: &GridFunction) -> GridFunction {
        let mut out = self.clone();
        out.axpy(-1.0, rhs);
        out
    }
}

impl Mul<f64> for &GridFunction {
    type Output = GridFunction;

    fn mul(self, rhs: f64) -> GridFunction {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= rhs);
        out
    }
}

/// A trajectory in `AC_0^2` held through its derivative `l = x'`, together
/// with the cached antiderivative `x` (`x(0) = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct DerivCoords {
    l: GridFunction,
    x: GridFunction,
}

impl DerivCoords {
    pub fn from_derivative(l: GridFunction) -> Self {
        let x = cumtrapz(&l);
        Self { l, x }
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self::from_derivative(GridFunction::zeros(grid, dim))
    }

    /// Derivative samples `l = x'`.
    pub fn l(&self) -> &GridFunction {
        &self.l
    }

    /// State samples `x(t_i)`.
    pub fn x(&self) -> &GridFunction {
        &self.x
    }

    pub fn grid(&self) -> TimeGrid {
        self.l.grid()
    }

    pub fn dim(&self) -> usize {
        self.l.dim()
    }

    pub fn into_derivative(self) -> GridFunction {
        self.l
    }
}

/// Random smooth function: every component is
/// `sum_{j < terms} a_j cos(j pi t) + b_j sin(j pi t)` with coefficients
/// drawn uniformly from `[-1, 1]`.
pub fn random_trig(grid: TimeGrid, dim: usize, terms: usize, rng: &mut impl Rng) -> GridFunction {
    let coeffs: Vec<(f64, f64)> = (0..dim * terms)
        .map(|_| (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)))
        .collect();
    GridFunction::from_fn(grid, dim, |t, out| {
        for (c, o) in out.iter_mut().enumerate() {
            *o = coeffs[c * terms..(c + 1) * terms]
                .iter()
                .enumerate()
                .map(|(j, (a, b))| {
                    let w = j as f64 * std::f64::consts::PI * t;
                    a * w.cos() + b * w.sin()
                })
                .sum();
        }
    })
}

pub(crate) fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Running trapezoid integral `x(t_i) = int_0^{t_i} l`, with `x(t_0) = 0`.
pub fn cumtrapz(l: &GridFunction) -> GridFunction {
    let grid = l.grid();
    let dim = l.dim();
    let half_h = 0.5 * grid.step();
    let mut x = GridFunction::zeros(grid, dim);
    for i in 1..grid.n_nodes() {
        for c in 0..dim {
            let prev = x.values[(i - 1) * dim + c];
            x.values[i * dim + c] =
                prev + half_h * (l.values[(i - 1) * dim + c] + l.values[i * dim + c]);
        }
    }
    x
}

/// `(int_0^1 |g(t)|^2 dt)^{1/2}` under the trapezoid rule.
pub fn l2_norm(g: &GridFunction) -> f64 {
    weighted_sq_sum(g, |_| 1.0).sqrt()
}

/// Bielecki norm `(int_0^1 e^{-kt} |l(t)|^2 dt)^{1/2}` under the trapezoid rule.
pub fn bielecki_norm(l: &GridFunction, k: f64) -> Result<f64, GridError> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(GridError::InvalidParameter(format!(
            "Bielecki weight must be positive and finite, got {k}"
        )));
    }
    Ok(weighted_sq_sum(l, |t| (-k * t).exp()).sqrt())
}

/// `||x||_{AC_0^2} = ||x'||_{L^2}`.
pub fn norm_ac02(x: &DerivCoords) -> f64 {
    l2_norm(x.l())
}

fn weighted_sq_sum(g: &GridFunction, density: impl Fn(f64) -> f64) -> f64 {
    let grid = g.grid();
    (0..grid.n_nodes())
        .map(|i| {
            let sq: f64 = g.node(i).iter().map(|v| v * v).sum();
            grid.weight(i) * density(grid.node(i)) * sq
        })
        .sum()
}

/// Trapezoid approximation of `int_0^{t_i} K(t_i, tau) d tau` over the nodes
/// `tau = t_0..=t_i`.
///
/// `kernel(t, tau, j, out)` must write `K(t, t_j)` into `out` (length `dim`).
/// Returns the zero vector for `i == 0`.
pub fn triangle_integral<F>(
    grid: TimeGrid,
    dim: usize,
    i: usize,
    mut kernel: F,
) -> Result<Vec<f64>, GridError>
where
    F: FnMut(f64, f64, usize, &mut [f64]),
{
    let mut acc = vec![0.0; dim];
    if i == 0 {
        return Ok(acc);
    }
    let t = grid.node(i);
    let mut buf = vec![0.0; dim];
    for j in 0..=i {
        let tau = grid.node(j);
        kernel(t, tau, j, &mut buf);
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(GridError::Evaluation { t, tau });
        }
        let w = grid.partial_weight(i, j);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += w * b;
        }
    }
    Ok(acc)
}
