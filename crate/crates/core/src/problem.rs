//! One instance of the control system
//!
//! ```text
//! x'(t) + int_0^t Phi(t, tau, x(tau), u(tau)) d tau = f(t, x(t), v(t)),   x(0) = 0,
//! ```
//!
//! frozen on a [`TimeGrid`], together with the growth and Lipschitz metadata
//! that the existence, coercivity and contraction estimates are stated in.
//!
//! The residual map `F(x, u, v)` and its two partial differentials are
//! evaluated node-wise with the trapezoid machinery from [`crate::grid`].

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{euclid, triangle_integral, DerivCoords, GridError, GridFunction, TimeGrid};

/// Number of intervals used when growth norms are not supplied and have to
/// be computed by quadrature.
pub const NORM_QUADRATURE_INTERVALS: usize = 512;

const SPOT_CHECK_SAMPLES: usize = 10;
const SPOT_CHECK_TOL: f64 = 1e-5;
const SPOT_CHECK_SEED: u64 = 0x5eed_f00d;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("kernel is not finite at (t, tau) = ({t}, {tau})")]
    KernelEvaluation { t: f64, tau: f64 },
    #[error("right-hand side is not finite at t = {t}")]
    RhsEvaluation { t: f64 },
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("grid functions live on different grids")]
    GridMismatch,
    #[error("{which} disagrees with central differences (relative error {rel_error:e})")]
    DerivativeCheck { which: &'static str, rel_error: f64 },
    #[error("invalid growth data: {0}")]
    InvalidGrowth(String),
}

/// Memory kernel `Phi(t, tau, x, u)` on `P = {0 <= tau <= t <= 1}` with its
/// partial Jacobians. Jacobians are written row-major.
pub trait Kernel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn eval(&self, t: f64, tau: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    /// `n x n` matrix `Phi_x`.
    fn jac_x(&self, t: f64, tau: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    /// `n x m` matrix `Phi_u`.
    fn jac_u(&self, t: f64, tau: f64, x: &[f64], u: &[f64], out: &mut [f64]);
}

/// Right-hand side `f(t, x, v)` with its partial Jacobians (row-major).
pub trait Rhs: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]);
    /// `n x n` matrix `f_x`.
    fn jac_x(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]);
    /// `n x r` matrix `f_v`.
    fn jac_v(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]);
}

pub type Weight2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type Weight1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Modulus = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Growth bounds for the kernel:
///
/// * `|Phi| <= a |x| + b omega(|u|)`
/// * `|Phi_x| <= c omega(|x|) + d omega(|u|)`
/// * `|Phi_u| <= a omega(|x|) + b omega(|u|)`
///
/// plus the Lipschitz constant `M` of `Phi` in `x`.
#[derive(Clone)]
pub struct KernelBounds {
    pub a: Weight2,
    pub b: Weight2,
    pub c: f64,
    pub d: f64,
    pub omega: Modulus,
    /// `||a||_{L^2(P)}`; computed by quadrature when `None`.
    pub norm_a: Option<f64>,
    /// `||b||_{L^2(P)}`; computed by quadrature when `None`.
    pub norm_b: Option<f64>,
    pub lipschitz: f64,
}

/// Growth bounds for the right-hand side:
///
/// * `|f| <= a_f |x| + b_f kappa(|v|)`
/// * `|f_x| <= c_f kappa(|x|) + d_f kappa(|v|)`
/// * `|f_v| <= a_f kappa(|x|) + b_f kappa(|v|)`
///
/// plus the Lipschitz constant `L` of `f` in `x`.
#[derive(Clone)]
pub struct RhsBounds {
    pub a_f: Weight1,
    pub b_f: Weight1,
    pub c_f: f64,
    pub d_f: f64,
    pub kappa: Modulus,
    pub norm_a_f: Option<f64>,
    pub norm_b_f: Option<f64>,
    /// `(int_0^1 a_f(t)^2 t dt)^{1/2}`.
    pub s_f: Option<f64>,
    pub lipschitz: f64,
}

/// The scalar norms the hypothesis check and the coercivity bound need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthNorms {
    pub norm_a: f64,
    pub norm_b: f64,
    pub norm_a_f: f64,
    pub norm_b_f: f64,
    pub s_f: f64,
}

impl GrowthNorms {
    pub fn zero() -> Self {
        Self {
            norm_a: 0.0,
            norm_b: 0.0,
            norm_a_f: 0.0,
            norm_b_f: 0.0,
            s_f: 0.0,
        }
    }
}

/// Validated growth and Lipschitz metadata for a kernel/right-hand side pair.
#[derive(Clone)]
pub struct GrowthData {
    kernel: KernelBounds,
    rhs: RhsBounds,
    norms: GrowthNorms,
}

impl fmt::Debug for GrowthData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GrowthData")
            .field("c", &self.kernel.c)
            .field("d", &self.kernel.d)
            .field("c_f", &self.rhs.c_f)
            .field("d_f", &self.rhs.d_f)
            .field("lip_l", &self.rhs.lipschitz)
            .field("lip_m", &self.kernel.lipschitz)
            .field("norms", &self.norms)
            .finish()
    }
}

impl GrowthData {
    pub fn new(kernel: KernelBounds, rhs: RhsBounds) -> Result<Self, ModelError> {
        for (name, v) in [
            ("c", kernel.c),
            ("d", kernel.d),
            ("c_f", rhs.c_f),
            ("d_f", rhs.d_f),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidGrowth(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        for (name, v) in [("M", kernel.lipschitz), ("L", rhs.lipschitz)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidGrowth(format!(
                    "Lipschitz constant {name} must be nonnegative and finite, got {v}"
                )));
            }
        }
        for (name, m) in [("omega", &kernel.omega), ("kappa", &rhs.kappa)] {
            for s in [0.0, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0] {
                let v = m(s);
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(ModelError::InvalidGrowth(format!(
                        "{name}({s}) = {v} is not a nonnegative finite value"
                    )));
                }
            }
        }

        let quad = TimeGrid::new(NORM_QUADRATURE_INTERVALS).expect("quadrature grid");
        let norms = GrowthNorms {
            norm_a: kernel
                .norm_a
                .unwrap_or_else(|| triangle_l2_norm(quad, &*kernel.a)),
            norm_b: kernel
                .norm_b
                .unwrap_or_else(|| triangle_l2_norm(quad, &*kernel.b)),
            norm_a_f: rhs
                .norm_a_f
                .unwrap_or_else(|| interval_weighted_norm(quad, &*rhs.a_f, |_| 1.0)),
            norm_b_f: rhs
                .norm_b_f
                .unwrap_or_else(|| interval_weighted_norm(quad, &*rhs.b_f, |_| 1.0)),
            s_f: rhs
                .s_f
                .unwrap_or_else(|| interval_weighted_norm(quad, &*rhs.a_f, |t| t)),
        };
        for (name, v) in [
            ("||a||", norms.norm_a),
            ("||b||", norms.norm_b),
            ("||a_f||", norms.norm_a_f),
            ("||b_f||", norms.norm_b_f),
            ("s_f", norms.s_f),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidGrowth(format!(
                    "{name} must be nonnegative and finite, got {v}"
                )));
            }
        }
        Ok(Self { kernel, rhs, norms })
    }

    pub fn norms(&self) -> GrowthNorms {
        self.norms
    }

    pub fn kernel_bounds(&self) -> &KernelBounds {
        &self.kernel
    }

    pub fn rhs_bounds(&self) -> &RhsBounds {
        &self.rhs
    }

    pub fn omega(&self, s: f64) -> f64 {
        (self.kernel.omega)(s)
    }

    pub fn kappa(&self, s: f64) -> f64 {
        (self.rhs.kappa)(s)
    }

    /// Lipschitz constant `L` of `x -> f(t, x, v)`.
    pub fn lip_l(&self) -> f64 {
        self.rhs.lipschitz
    }

    /// Lipschitz constant `M` of `x -> Phi(t, tau, x, u)`.
    pub fn lip_m(&self) -> f64 {
        self.kernel.lipschitz
    }
}

fn triangle_l2_norm(grid: TimeGrid, w: &dyn Fn(f64, f64) -> f64) -> f64 {
    let mut total = 0.0;
    for i in 1..grid.n_nodes() {
        let t = grid.node(i);
        let inner: f64 = (0..=i)
            .map(|j| {
                let v = w(t, grid.node(j));
                grid.partial_weight(i, j) * v * v
            })
            .sum();
        total += grid.weight(i) * inner;
    }
    total.sqrt()
}

fn interval_weighted_norm(
    grid: TimeGrid,
    w: &dyn Fn(f64) -> f64,
    density: impl Fn(f64) -> f64,
) -> f64 {
    (0..grid.n_nodes())
        .map(|i| {
            let t = grid.node(i);
            let v = w(t);
            grid.weight(i) * density(t) * v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Sampled controls plus their discrete essential-supremum bounds
/// `A = max_i omega(|u(t_i)|)` and `B = max_i kappa(|v(t_i)|)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Controls {
    u: GridFunction,
    v: GridFunction,
    a_bound: f64,
    b_bound: f64,
}

impl Controls {
    pub fn new(u: GridFunction, v: GridFunction, growth: &GrowthData) -> Result<Self, ModelError> {
        if u.grid() != v.grid() {
            return Err(ModelError::GridMismatch);
        }
        let grid = u.grid();
        let a_bound = (0..grid.n_nodes())
            .map(|i| growth.omega(euclid(u.node(i))))
            .fold(0.0, f64::max);
        let b_bound = (0..grid.n_nodes())
            .map(|i| growth.kappa(euclid(v.node(i))).powi(2))
            .fold(0.0, f64::max);
        Ok(Self {
            u,
            v,
            a_bound,
            b_bound,
        })
    }

    pub fn u(&self) -> &GridFunction {
        &self.u
    }

    pub fn v(&self) -> &GridFunction {
        &self.v
    }

    /// `A`, the sampled supremum of `omega(|u|)`.
    pub fn a_bound(&self) -> f64 {
        self.a_bound
    }

    /// `B`, the sampled supremum of `kappa(|v|)^2`.
    pub fn b_bound(&self) -> f64 {
        self.b_bound
    }
}

/// Kernel, right-hand side, growth metadata and controls frozen on a grid.
#[derive(Clone)]
pub struct ProblemInstance {
    kernel: Arc<dyn Kernel>,
    rhs: Arc<dyn Rhs>,
    growth: Arc<GrowthData>,
    controls: Controls,
    grid: TimeGrid,
}

impl fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("grid", &self.grid)
            .field("dim_n", &self.dim_n())
            .field("dim_m", &self.dim_m())
            .field("dim_r", &self.dim_r())
            .field("growth", &self.growth)
            .finish_non_exhaustive()
    }
}

impl ProblemInstance {
    /// Builds an instance, checking dimensions and spot-checking the
    /// supplied Jacobians against central differences.
    pub fn new(
        kernel: Arc<dyn Kernel>,
        rhs: Arc<dyn Rhs>,
        growth: Arc<GrowthData>,
        u: GridFunction,
        v: GridFunction,
    ) -> Result<Self, ModelError> {
        let n = kernel.state_dim();
        if n == 0 {
            return Err(GridError::ZeroDimension.into());
        }
        if rhs.state_dim() != n {
            return Err(ModelError::DimensionMismatch {
                what: "right-hand side state",
                expected: n,
                got: rhs.state_dim(),
            });
        }
        if u.dim() != kernel.control_dim() {
            return Err(ModelError::DimensionMismatch {
                what: "control u",
                expected: kernel.control_dim(),
                got: u.dim(),
            });
        }
        if v.dim() != rhs.control_dim() {
            return Err(ModelError::DimensionMismatch {
                what: "control v",
                expected: rhs.control_dim(),
                got: v.dim(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(SPOT_CHECK_SEED);
        spot_check_kernel(&*kernel, &mut rng)?;
        spot_check_rhs(&*rhs, &mut rng)?;

        let grid = u.grid();
        let controls = Controls::new(u, v, &growth)?;
        Ok(Self {
            kernel,
            rhs,
            growth,
            controls,
            grid,
        })
    }

    /// Same kernel, right-hand side and metadata with different controls.
    pub fn with_controls(&self, u: GridFunction, v: GridFunction) -> Result<Self, ModelError> {
        if u.dim() != self.dim_m() {
            return Err(ModelError::DimensionMismatch {
                what: "control u",
                expected: self.dim_m(),
                got: u.dim(),
            });
        }
        if v.dim() != self.dim_r() {
            return Err(ModelError::DimensionMismatch {
                what: "control v",
                expected: self.dim_r(),
                got: v.dim(),
            });
        }
        let grid = u.grid();
        let controls = Controls::new(u, v, &self.growth)?;
        Ok(Self {
            kernel: Arc::clone(&self.kernel),
            rhs: Arc::clone(&self.rhs),
            growth: Arc::clone(&self.growth),
            controls,
            grid,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim_n(&self) -> usize {
        self.kernel.state_dim()
    }

    pub fn dim_m(&self) -> usize {
        self.kernel.control_dim()
    }

    pub fn dim_r(&self) -> usize {
        self.rhs.control_dim()
    }

    pub fn kernel(&self) -> &dyn Kernel {
        &*self.kernel
    }

    pub fn rhs(&self) -> &dyn Rhs {
        &*self.rhs
    }

    pub fn growth(&self) -> &GrowthData {
        &self.growth
    }

    pub fn controls(&self) -> &Controls {
        &self.controls
    }

    pub(crate) fn check_state(&self, g: &GridFunction) -> Result<(), ModelError> {
        if g.grid() != self.grid {
            return Err(ModelError::GridMismatch);
        }
        if g.dim() != self.dim_n() {
            return Err(ModelError::DimensionMismatch {
                what: "state",
                expected: self.dim_n(),
                got: g.dim(),
            });
        }
        Ok(())
    }

    /// `int_0^{t_i} Phi(t_i, tau, x(tau), u(tau)) d tau` at every node.
    pub fn memory_term(&self, x: &GridFunction) -> Result<GridFunction, ModelError> {
        self.check_state(x)?;
        let n = self.dim_n();
        let u = self.controls.u();
        let mut out = GridFunction::zeros(self.grid, n);
        for i in 1..self.grid.n_nodes() {
            let acc = triangle_integral(self.grid, n, i, |t, tau, j, buf| {
                self.kernel.eval(t, tau, x.node(j), u.node(j), buf)
            })
            .map_err(|e| match e {
                GridError::Evaluation { t, tau } => ModelError::KernelEvaluation { t, tau },
                other => other.into(),
            })?;
            out.node_mut(i).copy_from_slice(&acc);
        }
        Ok(out)
    }

    /// `f(t_i, x(t_i), v(t_i))` at every node.
    pub fn forcing_term(&self, x: &GridFunction) -> Result<GridFunction, ModelError> {
        self.check_state(x)?;
        let v = self.controls.v();
        let mut out = GridFunction::zeros(self.grid, self.dim_n());
        for i in 0..self.grid.n_nodes() {
            let t = self.grid.node(i);
            let slot = out.node_mut(i);
            self.rhs.eval(t, x.node(i), v.node(i), slot);
            if slot.iter().any(|s| !s.is_finite()) {
                return Err(ModelError::RhsEvaluation { t });
            }
        }
        Ok(out)
    }
}

/// `out += alpha * mat * v` for a row-major `rows x cols` matrix.
pub(crate) fn matvec_acc(mat: &[f64], cols: usize, v: &[f64], alpha: f64, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &mat[r * cols..(r + 1) * cols];
        *o += alpha * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Spectral norm of a row-major `rows x cols` matrix.
pub fn spectral_norm(mat: &[f64], rows: usize, cols: usize) -> f64 {
    if rows == 1 || cols == 1 {
        return euclid(mat);
    }
    DMatrix::from_row_slice(rows, cols, mat)
        .singular_values()
        .max()
}

/// Residual map `F(x, u, v)(t_i) = x'(t_i) + int_0^{t_i} Phi - f(t_i, x(t_i), v(t_i))`.
pub fn residual_f(p: &ProblemInstance, x: &DerivCoords) -> Result<GridFunction, ModelError> {
    let mut out = x.l().clone();
    p.check_state(&out)?;
    out.axpy(1.0, &p.memory_term(x.x())?);
    out.axpy(-1.0, &p.forcing_term(x.x())?);
    Ok(out)
}

/// Differential in the state: `F_x(x, u, v) h`.
pub fn apply_fx(
    p: &ProblemInstance,
    x: &DerivCoords,
    h: &DerivCoords,
) -> Result<GridFunction, ModelError> {
    p.check_state(x.l())?;
    p.check_state(h.l())?;
    let grid = p.grid();
    let n = p.dim_n();
    let (u, v) = (p.controls().u(), p.controls().v());
    let (xs, hs) = (x.x(), h.x());
    let mut out = h.l().clone();
    let mut jac = vec![0.0; n * n];
    for i in 0..grid.n_nodes() {
        let t = grid.node(i);
        let slot = out.node_mut(i);
        for j in 0..=i {
            let w = grid.partial_weight(i, j);
            if w == 0.0 {
                continue;
            }
            let tau = grid.node(j);
            p.kernel().jac_x(t, tau, xs.node(j), u.node(j), &mut jac);
            if jac.iter().any(|a| !a.is_finite()) {
                return Err(ModelError::KernelEvaluation { t, tau });
            }
            matvec_acc(&jac, n, hs.node(j), w, slot);
        }
        p.rhs().jac_x(t, xs.node(i), v.node(i), &mut jac);
        if jac.iter().any(|a| !a.is_finite()) {
            return Err(ModelError::RhsEvaluation { t });
        }
        matvec_acc(&jac, n, hs.node(i), -1.0, slot);
    }
    Ok(out)
}

/// Differential in the controls: `F_{u,v}(x, u, v)(du, dv)`.
pub fn apply_fuv(
    p: &ProblemInstance,
    x: &DerivCoords,
    du: &GridFunction,
    dv: &GridFunction,
) -> Result<GridFunction, ModelError> {
    p.check_state(x.l())?;
    let grid = p.grid();
    if du.grid() != grid || dv.grid() != grid {
        return Err(ModelError::GridMismatch);
    }
    let (n, m, r) = (p.dim_n(), p.dim_m(), p.dim_r());
    if du.dim() != m {
        return Err(ModelError::DimensionMismatch {
            what: "perturbation du",
            expected: m,
            got: du.dim(),
        });
    }
    if dv.dim() != r {
        return Err(ModelError::DimensionMismatch {
            what: "perturbation dv",
            expected: r,
            got: dv.dim(),
        });
    }
    let (u, v) = (p.controls().u(), p.controls().v());
    let xs = x.x();
    let mut out = GridFunction::zeros(grid, n);
    let mut jac_u = vec![0.0; n * m];
    let mut jac_v = vec![0.0; n * r];
    for i in 0..grid.n_nodes() {
        let t = grid.node(i);
        let slot = out.node_mut(i);
        for j in 0..=i {
            let w = grid.partial_weight(i, j);
            if w == 0.0 {
                continue;
            }
            let tau = grid.node(j);
            p.kernel().jac_u(t, tau, xs.node(j), u.node(j), &mut jac_u);
            if jac_u.iter().any(|a| !a.is_finite()) {
                return Err(ModelError::KernelEvaluation { t, tau });
            }
            matvec_acc(&jac_u, m, du.node(j), w, slot);
        }
        p.rhs().jac_v(t, xs.node(i), v.node(i), &mut jac_v);
        if jac_v.iter().any(|a| !a.is_finite()) {
            return Err(ModelError::RhsEvaluation { t });
        }
        matvec_acc(&jac_v, r, dv.node(i), -1.0, slot);
    }
    Ok(out)
}

fn random_vec(rng: &mut impl Rng, len: usize, radius: f64) -> Vec<f64> {
    (0..len)
        .map(|_| rng.random_range(-radius..=radius))
        .collect()
}

/// Largest entry-wise discrepancy between an analytic Jacobian and central
/// differences of `eval`, relative to `max(1, max|analytic|)`.
fn jacobian_mismatch(
    rows: usize,
    point: &[f64],
    analytic: &[f64],
    mut eval: impl FnMut(&[f64], &mut [f64]),
) -> f64 {
    let cols = point.len();
    let mut p = point.to_vec();
    let mut plus = vec![0.0; rows];
    let mut minus = vec![0.0; rows];
    let scale = analytic.iter().fold(1.0f64, |m, a| m.max(a.abs()));
    let mut worst = 0.0f64;
    for c in 0..cols {
        let step = 1e-6 * point[c].abs().max(1.0);
        p[c] = point[c] + step;
        eval(&p, &mut plus);
        p[c] = point[c] - step;
        eval(&p, &mut minus);
        p[c] = point[c];
        for r in 0..rows {
            let fd = (plus[r] - minus[r]) / (2.0 * step);
            worst = worst.max((fd - analytic[r * cols + c]).abs() / scale);
        }
    }
    worst
}

fn spot_check_kernel(k: &dyn Kernel, rng: &mut impl Rng) -> Result<(), ModelError> {
    let (n, m) = (k.state_dim(), k.control_dim());
    let mut jx = vec![0.0; n * n];
    let mut ju = vec![0.0; n * m];
    for _ in 0..SPOT_CHECK_SAMPLES {
        let t: f64 = rng.random_range(0.0..=1.0);
        let tau = rng.random_range(0.0..=t);
        let x = random_vec(rng, n, 2.0);
        let u = random_vec(rng, m, 2.0);
        k.jac_x(t, tau, &x, &u, &mut jx);
        let err = jacobian_mismatch(n, &x, &jx, |xp, out| k.eval(t, tau, xp, &u, out));
        if !(err <= SPOT_CHECK_TOL) {
            return Err(ModelError::DerivativeCheck {
                which: "Phi_x",
                rel_error: err,
            });
        }
        if m > 0 {
            k.jac_u(t, tau, &x, &u, &mut ju);
            let err = jacobian_mismatch(n, &u, &ju, |up, out| k.eval(t, tau, &x, up, out));
            if !(err <= SPOT_CHECK_TOL) {
                return Err(ModelError::DerivativeCheck {
                    which: "Phi_u",
                    rel_error: err,
                });
            }
        }
    }
    Ok(())
}

fn spot_check_rhs(f: &dyn Rhs, rng: &mut impl Rng) -> Result<(), ModelError> {
    let (n, r) = (f.state_dim(), f.control_dim());
    let mut jx = vec![0.0; n * n];
    let mut jv = vec![0.0; n * r];
    for _ in 0..SPOT_CHECK_SAMPLES {
        let t: f64 = rng.random_range(0.0..=1.0);
        let x = random_vec(rng, n, 2.0);
        let v = random_vec(rng, r, 2.0);
        f.jac_x(t, &x, &v, &mut jx);
        let err = jacobian_mismatch(n, &x, &jx, |xp, out| f.eval(t, xp, &v, out));
        if !(err <= SPOT_CHECK_TOL) {
            return Err(ModelError::DerivativeCheck {
                which: "f_x",
                rel_error: err,
            });
        }
        if r > 0 {
            f.jac_v(t, &x, &v, &mut jv);
            let err = jacobian_mismatch(n, &v, &jv, |vp, out| f.eval(t, &x, vp, out));
            if !(err <= SPOT_CHECK_TOL) {
                return Err(ModelError::DerivativeCheck {
                    which: "f_v",
                    rel_error: err,
                });
            }
        }
    }
    Ok(())
}

/// Outcome of sampling the growth inequalities.
#[derive(Debug, Clone, Default)]
pub struct GrowthConformance {
    pub checked: usize,
    pub violations: Vec<String>,
}

impl GrowthConformance {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Samples the six growth inequalities at `samples` random points.
pub fn check_growth(
    kernel: &dyn Kernel,
    rhs: &dyn Rhs,
    growth: &GrowthData,
    samples: usize,
    rng: &mut impl Rng,
) -> GrowthConformance {
    let (n, m, r) = (kernel.state_dim(), kernel.control_dim(), rhs.control_dim());
    let kb = growth.kernel_bounds();
    let rb = growth.rhs_bounds();
    let mut report = GrowthConformance::default();
    let mut phi = vec![0.0; n];
    let mut jx = vec![0.0; n * n];
    let mut ju = vec![0.0; n * m];
    let mut jv = vec![0.0; n * r];
    let check = |label: &str, lhs: f64, rhs: f64, report: &mut GrowthConformance| {
        report.checked += 1;
        if lhs > rhs * (1.0 + 1e-12) + 1e-12 {
            report
                .violations
                .push(format!("{label}: {lhs:e} > {rhs:e}"));
        }
    };
    for _ in 0..samples {
        let radius = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let t: f64 = rng.random_range(0.0..=1.0);
        let tau = rng.random_range(0.0..=t);
        let x = random_vec(rng, n, radius);
        let u = random_vec(rng, m, radius);
        let v = random_vec(rng, r, radius);
        let (ax, au, av) = (euclid(&x), euclid(&u), euclid(&v));

        let a = (kb.a)(t, tau);
        let b = (kb.b)(t, tau);
        let (om_x, om_u) = ((kb.omega)(ax), (kb.omega)(au));
        kernel.eval(t, tau, &x, &u, &mut phi);
        check("|Phi|", euclid(&phi), a * ax + b * om_u, &mut report);
        kernel.jac_x(t, tau, &x, &u, &mut jx);
        check(
            "|Phi_x|",
            spectral_norm(&jx, n, n),
            kb.c * om_x + kb.d * om_u,
            &mut report,
        );
        if m > 0 {
            kernel.jac_u(t, tau, &x, &u, &mut ju);
            check(
                "|Phi_u|",
                spectral_norm(&ju, n, m),
                a * om_x + b * om_u,
                &mut report,
            );
        }

        let a_f = (rb.a_f)(t);
        let b_f = (rb.b_f)(t);
        let (ka_x, ka_v) = ((rb.kappa)(ax), (rb.kappa)(av));
        rhs.eval(t, &x, &v, &mut phi);
        check("|f|", euclid(&phi), a_f * ax + b_f * ka_v, &mut report);
        rhs.jac_x(t, &x, &v, &mut jx);
        check(
            "|f_x|",
            spectral_norm(&jx, n, n),
            rb.c_f * ka_x + rb.d_f * ka_v,
            &mut report,
        );
        if r > 0 {
            rhs.jac_v(t, &x, &v, &mut jv);
            check(
                "|f_v|",
                spectral_norm(&jv, n, r),
                a_f * ka_x + b_f * ka_v,
                &mut report,
            );
        }
    }
    report
}

/// Largest sampled difference quotients of `Phi` and `f` in `x`, compared
/// against the declared Lipschitz constants.
#[derive(Debug, Clone, Default)]
pub struct LipschitzProbe {
    pub max_quotient_kernel: f64,
    pub max_quotient_rhs: f64,
    pub kernel_violated: bool,
    pub rhs_violated: bool,
}

/// Samples difference quotients to flag dishonest Lipschitz metadata. This
/// can only ever find violations; it never certifies a constant.
pub fn probe_lipschitz(
    kernel: &dyn Kernel,
    rhs: &dyn Rhs,
    growth: &GrowthData,
    samples: usize,
    rng: &mut impl Rng,
) -> LipschitzProbe {
    let (n, m, r) = (kernel.state_dim(), kernel.control_dim(), rhs.control_dim());
    let mut p1 = vec![0.0; n];
    let mut p2 = vec![0.0; n];
    let mut probe = LipschitzProbe::default();
    for _ in 0..samples {
        let radius = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let t: f64 = rng.random_range(0.0..=1.0);
        let tau = rng.random_range(0.0..=t);
        let x1 = random_vec(rng, n, radius);
        let x2 = random_vec(rng, n, radius);
        let dx: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a - b).collect();
        let dist = euclid(&dx);
        if dist < 1e-12 {
            continue;
        }
        let u = random_vec(rng, m, radius);
        let v = random_vec(rng, r, radius);
        kernel.eval(t, tau, &x1, &u, &mut p1);
        kernel.eval(t, tau, &x2, &u, &mut p2);
        let qk = p1
            .iter()
            .zip(&p2)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            / dist;
        rhs.eval(t, &x1, &v, &mut p1);
        rhs.eval(t, &x2, &v, &mut p2);
        let qr = p1
            .iter()
            .zip(&p2)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            / dist;
        probe.max_quotient_kernel = probe.max_quotient_kernel.max(qk);
        probe.max_quotient_rhs = probe.max_quotient_rhs.max(qr);
    }
    probe.kernel_violated = probe.max_quotient_kernel > growth.lip_m() * (1.0 + 1e-9) + 1e-12;
    probe.rhs_violated = probe.max_quotient_rhs > growth.lip_l() * (1.0 + 1e-9) + 1e-12;
    probe
}
