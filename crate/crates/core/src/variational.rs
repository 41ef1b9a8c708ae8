//! The residual functional `phi(x) = 1/2 ||F(x, u, v)||^2_{L^2}` and what
//! can be done with it: its exact discrete gradient, the smallness
//! hypothesis that makes it coercive, a quadratic lower-bound certificate,
//! and a steepest-descent solver used to cross-check the Picard iteration.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use rand::Rng;
use thiserror::Error;

use crate::grid::{l2_norm, norm_ac02, random_trig, DerivCoords, GridFunction};
use crate::picard::{PicardError, SolverConfig};
use crate::problem::{matvec_acc, residual_f, GrowthNorms, ModelError, ProblemInstance};

/// Armijo sufficient-decrease constant.
pub const ARMIJO_C: f64 = 1e-4;
/// Step shrink factor of the backtracking line search.
pub const ARMIJO_SHRINK: f64 = 0.5;
/// Trial step at the start of every line search.
pub const ARMIJO_INITIAL_STEP: f64 = 1.0;
/// Backtracking gives up after this many halvings.
pub const ARMIJO_MAX_HALVINGS: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VariationalError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Solver(#[from] PicardError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `phi(x) = 1/2 ||F(x)||^2`.
pub fn phi(p: &ProblemInstance, x: &DerivCoords) -> Result<f64, ModelError> {
    let r = l2_norm(&residual_f(p, x)?);
    Ok(0.5 * r * r)
}

/// Gradient of the discrete `phi` with respect to the node values of
/// `l = x'`: `phi(l + eps h) = phi(l) + eps sum_i G_i . h_i + O(eps^2)`.
///
/// With `r_i = w_i F_i` (trapezoid weights `w_i`) and `x = W l`,
///
/// ```text
/// s_j = sum_{i >= j} W_ij Phi_x(t_i, t_j)^T r_i - f_x(t_j)^T r_j,    G = r + W^T s.
/// ```
pub fn phi_gradient(p: &ProblemInstance, x: &DerivCoords) -> Result<GridFunction, ModelError> {
    let residual = residual_f(p, x)?;
    let grid = p.grid();
    let n = p.dim_n();
    let nodes = grid.n_nodes();
    let (u, v) = (p.controls().u(), p.controls().v());
    let xs = x.x();

    let mut r = residual.into_values();
    for i in 0..nodes {
        let w = grid.weight(i);
        r[i * n..(i + 1) * n].iter_mut().for_each(|a| *a *= w);
    }

    let mut jac = vec![0.0; n * n];
    let mut jac_t = vec![0.0; n * n];
    let mut s = vec![0.0; nodes * n];
    for j in 0..nodes {
        let tau = grid.node(j);
        let slot = &mut s[j * n..(j + 1) * n];
        for i in j.max(1)..nodes {
            let w = grid.partial_weight(i, j);
            let t = grid.node(i);
            p.kernel().jac_x(t, tau, xs.node(j), u.node(j), &mut jac);
            if jac.iter().any(|a| !a.is_finite()) {
                return Err(ModelError::KernelEvaluation { t, tau });
            }
            transpose(&jac, n, &mut jac_t);
            matvec_acc(&jac_t, n, &r[i * n..(i + 1) * n], w, slot);
        }
        p.rhs().jac_x(tau, xs.node(j), v.node(j), &mut jac);
        if jac.iter().any(|a| !a.is_finite()) {
            return Err(ModelError::RhsEvaluation { t: tau });
        }
        transpose(&jac, n, &mut jac_t);
        matvec_acc(&jac_t, n, &r[j * n..(j + 1) * n], -1.0, slot);
    }

    // G = r + W^T s, accumulated from the right: (W^T s)_k = sum_{j >= k} W_jk s_j.
    let h = grid.step();
    let mut tail = vec![0.0; n]; // sum_{j > k} s_j
    let mut g = r;
    for k in (0..nodes).rev() {
        for c in 0..n {
            let own = if k == 0 { 0.0 } else { 0.5 * h * s[k * n + c] };
            let from_later = if k == 0 {
                0.5 * h * tail[c]
            } else {
                h * tail[c]
            };
            g[k * n + c] += own + from_later;
            tail[c] += s[k * n + c];
        }
    }
    Ok(GridFunction::new(grid, n, g)?)
}

fn transpose(m: &[f64], n: usize, out: &mut [f64]) {
    for r in 0..n {
        for c in 0..n {
            out[c * n + r] = m[r * n + c];
        }
    }
}

/// Norm of the gradient as an element of `L^2` (the Riesz representative
/// `G_i / w_i` measured in the trapezoid norm): `(sum_i |G_i|^2 / w_i)^{1/2}`.
pub fn grad_norm(g: &GridFunction) -> f64 {
    let grid = g.grid();
    (0..grid.n_nodes())
        .map(|i| g.node(i).iter().map(|a| a * a).sum::<f64>() / grid.weight(i))
        .sum::<f64>()
        .sqrt()
}

/// Outcome of the smallness hypothesis
/// `||a|| + 2 s_f (1 + ||a||) < sqrt(2)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionCheck {
    pub lhs: f64,
    pub threshold: f64,
    /// `threshold - lhs`; positive iff the check passes.
    pub margin: f64,
    pub passed: bool,
}

pub fn check_condition(norms: &GrowthNorms) -> ConditionCheck {
    let lhs = norms.norm_a + 2.0 * norms.s_f * (1.0 + norms.norm_a);
    let margin = FRAC_1_SQRT_2 - lhs;
    ConditionCheck {
        lhs,
        threshold: FRAC_1_SQRT_2,
        margin,
        passed: lhs < FRAC_1_SQRT_2,
    }
}

/// Coefficients of `phi(x) >= c2 ||x||^2 - c1 ||x|| - c0` (norm of `AC_0^2`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoercivityBound {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl CoercivityBound {
    pub fn lower_bound(&self, norm: f64) -> f64 {
        self.c2 * norm * norm - self.c1 * norm - self.c0
    }
}

/// Lower-bound coefficients given the growth norms and the control bounds
/// `A = sup omega(|u|)`, `B = sup kappa(|v|)^2`.
///
/// `c2 = 1/2 - (sqrt2/2) ||a|| - sqrt2 s_f (1 + ||a||)`, computed as
/// `(sqrt2/2) * margin` so its sign agrees with [`check_condition`] exactly.
/// Every linear and constant cross term is counted against the bound.
pub fn coercivity_coefficients(norms: &GrowthNorms, a_ctl: f64, b_ctl: f64) -> CoercivityBound {
    let GrowthNorms {
        norm_a: a,
        norm_b: b,
        norm_b_f: bf,
        s_f: s,
        ..
    } = *norms;
    let c2 = FRAC_1_SQRT_2 * check_condition(norms).margin;
    let sb = (2.0 * b_ctl).sqrt() * bf;
    let ab = a_ctl * b;
    let c1 = a_ctl + ab + sb + sb * ab + 2.0 * ab * s + sb * a;
    let c0 = 2.0 * ab * b_ctl.sqrt() * bf;
    CoercivityBound { c2, c1, c0 }
}

/// Coefficients for the controls frozen in `p`.
pub fn coercivity_for(p: &ProblemInstance) -> CoercivityBound {
    let c = p.controls();
    coercivity_coefficients(&p.growth().norms(), c.a_bound(), c.b_bound())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoercivityProbe {
    pub bound: CoercivityBound,
    pub samples: usize,
    pub violations: usize,
    /// Smallest `phi(x) - bound(||x||)` seen.
    pub min_slack: f64,
}

impl CoercivityProbe {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Evaluates `phi` on `samples` random smooth trajectories with
/// `||x||_{AC_0^2}` uniform in `[0, radius]` and counts violations of the
/// quadratic lower bound.
pub fn coercivity_probe(
    p: &ProblemInstance,
    samples: usize,
    radius: f64,
    rng: &mut impl Rng,
) -> Result<CoercivityProbe, VariationalError> {
    if samples == 0 {
        return Err(VariationalError::InvalidParameter(
            "samples must be at least 1".into(),
        ));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(VariationalError::InvalidParameter(format!(
            "radius must be positive, got {radius}"
        )));
    }
    let bound = coercivity_for(p);
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    let mut done = 0;
    while done < samples {
        let shape = random_trig(p.grid(), p.dim_n(), 6, rng);
        let norm = l2_norm(&shape);
        if norm < 1e-12 {
            continue;
        }
        let target = rng.random_range(0.0..=radius);
        let x = DerivCoords::from_derivative(&shape * (target / norm));
        let r = norm_ac02(&x);
        let slack = phi(p, &x)? - bound.lower_bound(r);
        min_slack = min_slack.min(slack);
        if slack < 0.0 {
            violations += 1;
        }
        done += 1;
    }
    Ok(CoercivityProbe {
        bound,
        samples,
        violations,
        min_slack,
    })
}

/// Record of a descent run: the empirical Palais–Smale sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    pub iterations: usize,
    /// `phi` at every iterate, starting with the initial one.
    pub phi_values: Vec<f64>,
    /// [`grad_norm`] at every iterate, starting with the initial one.
    pub grad_norms: Vec<f64>,
    pub converged: bool,
    pub line_search_failed: bool,
}

/// Steepest descent on `phi` along the `L^2` gradient with Armijo
/// backtracking, stopping once the gradient norm is at most `cfg.tol`.
/// The weight `cfg.k` is not used.
pub fn descent_solve(
    p: &ProblemInstance,
    cfg: &SolverConfig,
) -> Result<(DerivCoords, DescentReport), VariationalError> {
    cfg.validate()?;
    let grid = p.grid();
    let mut x = DerivCoords::from_derivative(cfg.initial_for(grid, p.dim_n())?);
    let mut value = phi(p, &x)?;
    let mut g = phi_gradient(p, &x)?;
    let mut gn = grad_norm(&g);
    let mut report = DescentReport {
        iterations: 0,
        phi_values: vec![value],
        grad_norms: vec![gn],
        converged: gn <= cfg.tol,
        line_search_failed: false,
    };
    while !report.converged && report.iterations < cfg.max_iter {
        let mut dir = g;
        for i in 0..grid.n_nodes() {
            let w = grid.weight(i);
            dir.node_mut(i).iter_mut().for_each(|a| *a = -*a / w);
        }
        let mut step = ARMIJO_INITIAL_STEP;
        let mut accepted = None;
        for _ in 0..=ARMIJO_MAX_HALVINGS {
            let mut l = x.l().clone();
            l.axpy(step, &dir);
            let trial = DerivCoords::from_derivative(l);
            // Non-finite trial values count as insufficient decrease.
            if let Ok(v) = phi(p, &trial) {
                if v.is_finite() && v <= value - ARMIJO_C * step * gn * gn {
                    accepted = Some((trial, v));
                    break;
                }
            }
            step *= ARMIJO_SHRINK;
        }
        let Some((next, v)) = accepted else {
            report.line_search_failed = true;
            break;
        };
        x = next;
        value = v;
        g = phi_gradient(p, &x)?;
        gn = grad_norm(&g);
        report.iterations += 1;
        report.phi_values.push(value);
        report.grad_norms.push(gn);
        report.converged = gn <= cfg.tol;
    }
    Ok((x, report))
}

/// `(sqrt2/2) margin` written out term by term; kept for cross-checking.
pub fn c2_expanded(norms: &GrowthNorms) -> f64 {
    0.5 - FRAC_1_SQRT_2 * norms.norm_a - SQRT_2 * norms.s_f * (1.0 + norms.norm_a)
}
