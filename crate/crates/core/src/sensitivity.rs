//! Directional derivatives of the solution map `(u, v) -> x_{u,v}`.
//!
//! Differentiating the system along `(du, dv)` gives a linear problem for
//! `z = dx`:
//!
//! ```text
//! z' + int_0^t Phi_x(t, tau, x, u) z d tau - f_x(t, x, v) z
//!    = f_v(t, x, v) dv - int_0^t Phi_u(t, tau, x, u) du d tau,      z(0) = 0,
//! ```
//!
//! i.e. `F_x z = -F_{u,v}(du, dv)`. It has the same structure as the forward
//! problem and is solved by the same weighted Picard iteration.

use thiserror::Error;

use crate::grid::{cumtrapz, l2_norm, DerivCoords, GridFunction, TimeGrid};
use crate::picard::{
    resolve_k, run_fixed_point, FixedPointIteration, FixedPointMap, PicardError, SolveReport,
    SolverConfig,
};
use crate::problem::{
    apply_fuv, matvec_acc, residual_f, spectral_norm, ModelError, ProblemInstance,
};

/// Safety factor applied to the sampled Jacobian norms used as Lipschitz
/// constants of the linearized map.
pub const LIPSCHITZ_SAFETY: f64 = 1.1;

/// The base trajectory must have `||F||_2 <= PRECONDITION_FACTOR * tol`.
pub const PRECONDITION_FACTOR: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("base trajectory is not a solution: residual {residual:e} exceeds {threshold:e}")]
    NotASolution { residual: f64, threshold: f64 },
    #[error("{which} solve did not converge within {iterations} iterations")]
    NotConverged {
        which: &'static str,
        iterations: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Solver(#[from] PicardError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A direction `(du, dv)` in control space.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub du: GridFunction,
    pub dv: GridFunction,
}

impl Perturbation {
    pub fn new(du: GridFunction, dv: GridFunction) -> Result<Self, SensitivityError> {
        if du.grid() != dv.grid() {
            return Err(ModelError::GridMismatch.into());
        }
        if !du.is_finite() || !dv.is_finite() {
            return Err(SensitivityError::InvalidParameter(
                "perturbation has non-finite values".into(),
            ));
        }
        Ok(Self { du, dv })
    }

    pub fn zeros(p: &ProblemInstance) -> Self {
        Self {
            du: GridFunction::zeros(p.grid(), p.dim_m()),
            dv: GridFunction::zeros(p.grid(), p.dim_r()),
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            du: &self.du * alpha,
            dv: &self.dv * alpha,
        }
    }

    fn check(&self, p: &ProblemInstance) -> Result<(), ModelError> {
        if self.du.grid() != p.grid() || self.dv.grid() != p.grid() {
            return Err(ModelError::GridMismatch);
        }
        for (what, expected, got) in [
            ("perturbation du", p.dim_m(), self.du.dim()),
            ("perturbation dv", p.dim_r(), self.dv.dim()),
        ] {
            if expected != got {
                return Err(ModelError::DimensionMismatch {
                    what,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityResult {
    pub z: DerivCoords,
    pub report: SolveReport,
}

/// `T_z(l) = f_x z + forcing - int Phi_x z` with `z = cumtrapz(l)`, all
/// Jacobians frozen along a base trajectory.
pub struct LinearizedMap {
    grid: TimeGrid,
    n: usize,
    /// `f_x` at every node.
    fx: Vec<f64>,
    /// `Phi_x(t_i, t_j)` for `1 <= i`, `j <= i`, packed row by row.
    phix: Vec<f64>,
    forcing: GridFunction,
    lip_l: f64,
    lip_m: f64,
}

fn row_offset(i: usize) -> usize {
    // rows 1..i hold 2 + 3 + ... + i entries
    (i * (i + 1)) / 2 - 1
}

impl LinearizedMap {
    pub fn new(
        p: &ProblemInstance,
        x_sol: &DerivCoords,
        pert: &Perturbation,
    ) -> Result<Self, SensitivityError> {
        p.check_state(x_sol.l())?;
        pert.check(p)?;
        let grid = p.grid();
        let n = p.dim_n();
        let nodes = grid.n_nodes();
        let (u, v) = (p.controls().u(), p.controls().v());
        let xs = x_sol.x();
        let nn = n * n;

        let mut fx = vec![0.0; nodes * nn];
        let mut lip_l = 0.0f64;
        for i in 0..nodes {
            let t = grid.node(i);
            let jac = &mut fx[i * nn..(i + 1) * nn];
            p.rhs().jac_x(t, xs.node(i), v.node(i), jac);
            if jac.iter().any(|a| !a.is_finite()) {
                return Err(ModelError::RhsEvaluation { t }.into());
            }
            lip_l = lip_l.max(spectral_norm(jac, n, n));
        }

        let mut phix = vec![0.0; (row_offset(nodes - 1) + nodes) * nn];
        let mut lip_m = 0.0f64;
        for i in 1..nodes {
            let t = grid.node(i);
            for j in 0..=i {
                let tau = grid.node(j);
                let at = (row_offset(i) + j) * nn;
                let jac = &mut phix[at..at + nn];
                p.kernel().jac_x(t, tau, xs.node(j), u.node(j), jac);
                if jac.iter().any(|a| !a.is_finite()) {
                    return Err(ModelError::KernelEvaluation { t, tau }.into());
                }
                lip_m = lip_m.max(spectral_norm(jac, n, n));
            }
        }

        let mut forcing = apply_fuv(p, x_sol, &pert.du, &pert.dv)?;
        forcing = &forcing * -1.0;
        Ok(Self {
            grid,
            n,
            fx,
            phix,
            forcing,
            lip_l: LIPSCHITZ_SAFETY * lip_l,
            lip_m: LIPSCHITZ_SAFETY * lip_m,
        })
    }

    pub fn forcing(&self) -> &GridFunction {
        &self.forcing
    }
}

impl FixedPointMap for LinearizedMap {
    fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, l: &GridFunction) -> Result<GridFunction, ModelError> {
        if l.grid() != self.grid {
            return Err(ModelError::GridMismatch);
        }
        if l.dim() != self.n {
            return Err(ModelError::DimensionMismatch {
                what: "state",
                expected: self.n,
                got: l.dim(),
            });
        }
        let (n, nn) = (self.n, self.n * self.n);
        let z = cumtrapz(l);
        let mut out = self.forcing.clone();
        for i in 0..self.grid.n_nodes() {
            let slot = out.node_mut(i);
            matvec_acc(&self.fx[i * nn..(i + 1) * nn], n, z.node(i), 1.0, slot);
            if i == 0 {
                continue;
            }
            for j in 0..=i {
                let at = (row_offset(i) + j) * nn;
                let w = self.grid.partial_weight(i, j);
                matvec_acc(&self.phix[at..at + nn], n, z.node(j), -w, slot);
            }
        }
        Ok(out)
    }

    fn lipschitz(&self) -> (f64, f64) {
        (self.lip_l, self.lip_m)
    }
}

/// Solves `F_x z = -F_{u,v}(du, dv)` along a converged solution `x_sol`.
///
/// `x_sol` must satisfy `||F(x_sol)||_2 <= PRECONDITION_FACTOR * cfg.tol`;
/// `cfg.initial` is ignored (the linear solve starts from zero). Under
/// `WeightChoice::Auto` the weight comes from the sampled Jacobian norms.
pub fn sensitivity_solve(
    p: &ProblemInstance,
    x_sol: &DerivCoords,
    pert: &Perturbation,
    cfg: &SolverConfig,
) -> Result<SensitivityResult, SensitivityError> {
    cfg.validate()?;
    let residual = l2_norm(&residual_f(p, x_sol)?);
    let threshold = PRECONDITION_FACTOR * cfg.tol;
    if !(residual <= threshold) {
        return Err(SensitivityError::NotASolution {
            residual,
            threshold,
        });
    }
    let map = LinearizedMap::new(p, x_sol, pert)?;
    let cfg = SolverConfig {
        initial: None,
        ..cfg.clone()
    };
    let (l, report) = run_fixed_point(&map, &cfg)?;
    Ok(SensitivityResult {
        z: DerivCoords::from_derivative(l),
        report,
    })
}

/// One-sided difference quotient `(x(u + eps du, v + eps dv) - x(u, v)) / eps`.
///
/// Both nonlinear solves run in lockstep from the same start with the same
/// weight and stop together once both increments are within `cfg.tol`, so
/// on affine problems the quotient reproduces the linearized iterates
/// exactly, whatever `eps` is.
pub fn fd_directional(
    p: &ProblemInstance,
    pert: &Perturbation,
    eps: f64,
    cfg: &SolverConfig,
) -> Result<DerivCoords, SensitivityError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(SensitivityError::InvalidParameter(format!(
            "eps must be positive, got {eps}"
        )));
    }
    cfg.validate()?;
    pert.check(p)?;
    let mut u = p.controls().u().clone();
    u.axpy(eps, &pert.du);
    let mut v = p.controls().v().clone();
    v.axpy(eps, &pert.dv);
    let shifted = p.with_controls(u, v)?;

    let k = resolve_k(p, cfg)?;
    let start = cfg.initial_for(p.grid(), p.dim_n())?;
    let mut base = FixedPointIteration::new(p, start.clone(), k)?;
    let mut pert_iter = FixedPointIteration::new(&shifted, start, k)?;
    let mut base_done = false;
    let mut pert_done = false;
    for _ in 0..cfg.max_iter {
        base_done = base.step()? <= cfg.tol;
        pert_done = pert_iter.step()? <= cfg.tol;
        if base_done && pert_done {
            break;
        }
    }
    if !base_done {
        return Err(SensitivityError::NotConverged {
            which: "base",
            iterations: cfg.max_iter,
        });
    }
    if !pert_done {
        return Err(SensitivityError::NotConverged {
            which: "perturbed",
            iterations: cfg.max_iter,
        });
    }
    let mut diff = pert_iter.current().clone();
    diff.axpy(-1.0, base.current());
    Ok(DerivCoords::from_derivative(&diff * (1.0 / eps)))
}

/// Difference-quotient errors against the linearized solution.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityValidation {
    pub z: SensitivityResult,
    /// `(eps, max_i |x_fd(t_i) - z(t_i)|)` in input order.
    pub rows: Vec<(f64, f64)>,
}

impl SensitivityValidation {
    /// `error(eps_j) / error(eps_{j+1})` for consecutive rows.
    pub fn ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[0].1 / w[1].1).collect()
    }
}

/// Solves the base problem, the linearized problem, and one difference
/// quotient per entry of `eps_list` (strictly decreasing positives).
pub fn validate_sensitivity(
    p: &ProblemInstance,
    pert: &Perturbation,
    eps_list: &[f64],
    cfg: &SolverConfig,
) -> Result<SensitivityValidation, SensitivityError> {
    if eps_list.is_empty() {
        return Err(SensitivityError::InvalidParameter(
            "eps list is empty".into(),
        ));
    }
    if eps_list.iter().any(|e| !(*e > 0.0 && e.is_finite()))
        || eps_list.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(SensitivityError::InvalidParameter(
            "eps list must be strictly decreasing positives".into(),
        ));
    }
    let (x_sol, report) = crate::picard::picard_solve(p, cfg)?;
    if !report.converged {
        return Err(SensitivityError::NotConverged {
            which: "base",
            iterations: report.iterations,
        });
    }
    let z = sensitivity_solve(p, &x_sol, pert, cfg)?;
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let fd = fd_directional(p, pert, eps, cfg)?;
        rows.push((eps, fd.x().max_distance(z.z.x())));
    }
    Ok(SensitivityValidation { z, rows })
}
