//! Builtin kernels and right-hand sides, each shipped with hand-derived
//! growth bounds and Lipschitz constants.
//!
//! Every builtin acts componentwise on `R^n` and takes controls of the same
//! dimension (`m = r = n`). Both moduli are `omega(s) = kappa(s) = 1 + s`.
//!
//! | kernel               | `Phi(t, tau, x, u)`                       | `M`   |
//! |----------------------|-------------------------------------------|-------|
//! | `zero`               | `0`                                       | `0`   |
//! | `linear_scaled(a)`   | `a x`                                     | `|a|` |
//! | `linear_control(a,b)`| `a x + b u`                               | `|a|` |
//! | `exp_nonconv(a,b)`   | `a exp(-b (t - tau)) (sin x + u)`         | `|a|` |
//!
//! | rhs                  | `f(t, x, v)`                              | `L`             |
//! |----------------------|-------------------------------------------|-----------------|
//! | `constant(c)`        | `c`                                       | `0`             |
//! | `control_passthrough`| `v`                                       | `0`             |
//! | `saturating(c)`      | `c / (1 + x^2) + v`                       | `3 sqrt(3)/8 |c|` |
//! | `affine(g, c)`       | `g x + c + v`                             | `|g|`           |

use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::Arc;

use thiserror::Error;

use crate::grid::{GridFunction, TimeGrid};
use crate::problem::{
    GrowthData, Kernel, KernelBounds, ModelError, ProblemInstance, Rhs, RhsBounds,
};

/// `max_x |d/dx 1/(1+x^2)| = 3 sqrt(3) / 8`, attained at `x = 1/sqrt(3)`.
const SATURATING_SLOPE: f64 = 0.649_519_052_838_329;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuiltinError {
    #[error("{name} takes {expected} parameter(s), got {got}")]
    ParamCount {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("{0}")]
    InvalidParam(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelChoice {
    Zero,
    LinearScaled(f64),
    LinearControl(f64, f64),
    /// `(alpha, beta)` with `beta >= 0`.
    ExpNonconv(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhsChoice {
    Constant(f64),
    Passthrough,
    Saturating(f64),
    /// `(gamma, c)`.
    Affine(f64, f64),
}

fn expect_params(name: &str, params: &[f64], expected: usize) -> Result<(), BuiltinError> {
    if params.len() != expected {
        return Err(BuiltinError::ParamCount {
            name: name.to_string(),
            expected,
            got: params.len(),
        });
    }
    if let Some(p) = params.iter().find(|p| !p.is_finite()) {
        return Err(BuiltinError::InvalidParam(format!(
            "{name}: parameter {p} is not finite"
        )));
    }
    Ok(())
}

impl KernelChoice {
    pub const NAMES: [&'static str; 4] = ["zero", "linear_scaled", "linear_control", "exp_nonconv"];

    /// Parses a registry name plus parameter list. `Ok(None)` for unknown names.
    pub fn parse(name: &str, params: &[f64]) -> Result<Option<Self>, BuiltinError> {
        let choice = match name {
            "zero" => {
                expect_params(name, params, 0)?;
                KernelChoice::Zero
            }
            "linear_scaled" => {
                expect_params(name, params, 1)?;
                KernelChoice::LinearScaled(params[0])
            }
            "linear_control" => {
                expect_params(name, params, 2)?;
                KernelChoice::LinearControl(params[0], params[1])
            }
            "exp_nonconv" => {
                expect_params(name, params, 2)?;
                if params[1] < 0.0 {
                    return Err(BuiltinError::InvalidParam(format!(
                        "exp_nonconv: decay rate must be nonnegative, got {}",
                        params[1]
                    )));
                }
                KernelChoice::ExpNonconv(params[0], params[1])
            }
            _ => return Ok(None),
        };
        Ok(Some(choice))
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelChoice::Zero => "zero",
            KernelChoice::LinearScaled(_) => "linear_scaled",
            KernelChoice::LinearControl(..) => "linear_control",
            KernelChoice::ExpNonconv(..) => "exp_nonconv",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            KernelChoice::Zero => vec![],
            KernelChoice::LinearScaled(a) => vec![a],
            KernelChoice::LinearControl(a, b) | KernelChoice::ExpNonconv(a, b) => vec![a, b],
        }
    }
}

impl RhsChoice {
    pub const NAMES: [&'static str; 4] =
        ["constant", "control_passthrough", "saturating", "affine"];

    pub fn parse(name: &str, params: &[f64]) -> Result<Option<Self>, BuiltinError> {
        let choice = match name {
            "constant" => {
                expect_params(name, params, 1)?;
                RhsChoice::Constant(params[0])
            }
            "control_passthrough" => {
                expect_params(name, params, 0)?;
                RhsChoice::Passthrough
            }
            "saturating" => {
                expect_params(name, params, 1)?;
                RhsChoice::Saturating(params[0])
            }
            "affine" => {
                expect_params(name, params, 2)?;
                RhsChoice::Affine(params[0], params[1])
            }
            _ => return Ok(None),
        };
        Ok(Some(choice))
    }

    pub fn name(&self) -> &'static str {
        match self {
            RhsChoice::Constant(_) => "constant",
            RhsChoice::Passthrough => "control_passthrough",
            RhsChoice::Saturating(_) => "saturating",
            RhsChoice::Affine(..) => "affine",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            RhsChoice::Constant(c) | RhsChoice::Saturating(c) => vec![c],
            RhsChoice::Passthrough => vec![],
            RhsChoice::Affine(g, c) => vec![g, c],
        }
    }
}

struct BuiltinKernel {
    choice: KernelChoice,
    n: usize,
}

impl Kernel for BuiltinKernel {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn control_dim(&self) -> usize {
        self.n
    }

    fn eval(&self, t: f64, tau: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        for k in 0..self.n {
            out[k] = match self.choice {
                KernelChoice::Zero => 0.0,
                KernelChoice::LinearScaled(a) => a * x[k],
                KernelChoice::LinearControl(a, b) => a * x[k] + b * u[k],
                KernelChoice::ExpNonconv(a, b) => a * (-b * (t - tau)).exp() * (x[k].sin() + u[k]),
            };
        }
    }

    fn jac_x(&self, t: f64, tau: f64, x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for k in 0..self.n {
            out[k * self.n + k] = match self.choice {
                KernelChoice::Zero => 0.0,
                KernelChoice::LinearScaled(a) | KernelChoice::LinearControl(a, _) => a,
                KernelChoice::ExpNonconv(a, b) => a * (-b * (t - tau)).exp() * x[k].cos(),
            };
        }
    }

    fn jac_u(&self, t: f64, tau: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for k in 0..self.n {
            out[k * self.n + k] = match self.choice {
                KernelChoice::Zero | KernelChoice::LinearScaled(_) => 0.0,
                KernelChoice::LinearControl(_, b) => b,
                KernelChoice::ExpNonconv(a, b) => a * (-b * (t - tau)).exp(),
            };
        }
    }
}

struct BuiltinRhs {
    choice: RhsChoice,
    n: usize,
}

impl Rhs for BuiltinRhs {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn control_dim(&self) -> usize {
        self.n
    }

    fn eval(&self, _t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        for k in 0..self.n {
            out[k] = match self.choice {
                RhsChoice::Constant(c) => c,
                RhsChoice::Passthrough => v[k],
                RhsChoice::Saturating(c) => c / (1.0 + x[k] * x[k]) + v[k],
                RhsChoice::Affine(g, c) => g * x[k] + c + v[k],
            };
        }
    }

    fn jac_x(&self, _t: f64, x: &[f64], _v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for k in 0..self.n {
            out[k * self.n + k] = match self.choice {
                RhsChoice::Constant(_) | RhsChoice::Passthrough => 0.0,
                RhsChoice::Saturating(c) => {
                    let q = 1.0 + x[k] * x[k];
                    -2.0 * c * x[k] / (q * q)
                }
                RhsChoice::Affine(g, _) => g,
            };
        }
    }

    fn jac_v(&self, _t: f64, _x: &[f64], _v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for k in 0..self.n {
            out[k * self.n + k] = match self.choice {
                RhsChoice::Constant(_) => 0.0,
                _ => 1.0,
            };
        }
    }
}

fn check_dim(n: usize) -> Result<(), BuiltinError> {
    if n == 0 {
        return Err(BuiltinError::InvalidParam(
            "state dimension must be positive".into(),
        ));
    }
    Ok(())
}

pub fn kernel(choice: &KernelChoice, n: usize) -> Result<Arc<dyn Kernel>, BuiltinError> {
    check_dim(n)?;
    Ok(Arc::new(BuiltinKernel { choice: *choice, n }))
}

pub fn rhs(choice: &RhsChoice, n: usize) -> Result<Arc<dyn Rhs>, BuiltinError> {
    check_dim(n)?;
    Ok(Arc::new(BuiltinRhs { choice: *choice, n }))
}

fn one_plus(s: f64) -> f64 {
    1.0 + s
}

fn positive_or_one(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        1.0
    }
}

/// `int_0^1 int_0^t exp(-2 beta (t - tau)) d tau dt`.
fn exp_triangle_mass(beta: f64) -> f64 {
    if beta < 1e-4 {
        0.5 - beta / 3.0 + beta * beta / 6.0
    } else {
        1.0 / (2.0 * beta) - (1.0 - (-2.0 * beta).exp()) / (4.0 * beta * beta)
    }
}

pub fn kernel_bounds(choice: &KernelChoice) -> KernelBounds {
    let constant = |v: f64| -> crate::problem::Weight2 { Arc::new(move |_, _| v) };
    let (a, b, c, norm_a, norm_b, lipschitz) = match *choice {
        KernelChoice::Zero => (constant(0.0), constant(0.0), 1.0, 0.0, 0.0, 0.0),
        KernelChoice::LinearScaled(alpha) => {
            let s = alpha.abs();
            (
                constant(s),
                constant(0.0),
                positive_or_one(s),
                s * FRAC_1_SQRT_2,
                0.0,
                s,
            )
        }
        KernelChoice::LinearControl(alpha, beta) => {
            let (sa, sb) = (alpha.abs(), beta.abs());
            (
                constant(sa),
                constant(sb),
                positive_or_one(sa),
                sa * FRAC_1_SQRT_2,
                sb * FRAC_1_SQRT_2,
                sa,
            )
        }
        KernelChoice::ExpNonconv(alpha, beta) => {
            let s = alpha.abs();
            let w: crate::problem::Weight2 = Arc::new(move |t, tau| s * (-beta * (t - tau)).exp());
            let norm = s * exp_triangle_mass(beta).sqrt();
            (w.clone(), w, positive_or_one(s), norm, norm, s)
        }
    };
    KernelBounds {
        a,
        b,
        c,
        d: 1.0,
        omega: Arc::new(one_plus),
        norm_a: Some(norm_a),
        norm_b: Some(norm_b),
        lipschitz,
    }
}

pub fn rhs_bounds(choice: &RhsChoice, n: usize) -> RhsBounds {
    let constant = |v: f64| -> crate::problem::Weight1 { Arc::new(move |_| v) };
    let root_n = (n as f64).sqrt();
    let (a_f, b_f, lipschitz) = match *choice {
        RhsChoice::Constant(c) => (0.0, c.abs() * root_n, 0.0),
        RhsChoice::Passthrough => (0.0, 1.0, 0.0),
        RhsChoice::Saturating(c) => (0.0, (c.abs() * root_n).max(1.0), SATURATING_SLOPE * c.abs()),
        RhsChoice::Affine(g, c) => (g.abs(), (c.abs() * root_n).max(1.0), g.abs()),
    };
    RhsBounds {
        a_f: constant(a_f),
        b_f: constant(b_f),
        c_f: positive_or_one(lipschitz),
        d_f: 1.0,
        kappa: Arc::new(one_plus),
        norm_a_f: Some(a_f),
        norm_b_f: Some(b_f),
        s_f: Some(a_f * FRAC_1_SQRT_2),
        lipschitz,
    }
}

pub fn growth_for(
    kernel: &KernelChoice,
    rhs: &RhsChoice,
    n: usize,
) -> Result<GrowthData, BuiltinError> {
    check_dim(n)?;
    Ok(GrowthData::new(kernel_bounds(kernel), rhs_bounds(rhs, n))?)
}

/// Convenience constructor: builtin kernel and rhs on `N` intervals with
/// scalar control profiles broadcast to every component.
pub fn instance(
    kernel_choice: KernelChoice,
    rhs_choice: RhsChoice,
    n: usize,
    n_intervals: usize,
    u: impl Fn(f64) -> f64,
    v: impl Fn(f64) -> f64,
) -> Result<ProblemInstance, BuiltinError> {
    let grid = TimeGrid::new(n_intervals).map_err(ModelError::from)?;
    let u = GridFunction::from_fn(grid, n, |t, out| out.fill(u(t)));
    let v = GridFunction::from_fn(grid, n, |t, out| out.fill(v(t)));
    Ok(ProblemInstance::new(
        kernel(&kernel_choice, n)?,
        rhs(&rhs_choice, n)?,
        Arc::new(growth_for(&kernel_choice, &rhs_choice, n)?),
        u,
        v,
    )?)
}
