//! Numerical toolkit for Volterra integro-differential Cauchy problems
//!
//! ```text
//! x'(t) + int_0^t Phi(t, tau, x(tau), u(tau)) d tau = f(t, x(t), v(t)),   x(0) = 0,   t in [0, 1].
//! ```
//!
//! Solutions are computed by successive approximations in an exponentially
//! weighted `L^2` norm ([`picard`]), cross-checked by minimizing the squared
//! residual ([`variational`]), and differentiated with respect to the
//! controls ([`sensitivity`]).

// `!(a <= b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod builtins;
pub mod cli;
pub mod config;
pub mod grid;
pub mod output;
pub mod picard;
pub mod problem;
pub mod sensitivity;
pub mod variational;

pub use grid::{DerivCoords, GridError, GridFunction, TimeGrid};
pub use picard::{picard_solve, PicardError, SolveReport, SolverConfig, WeightChoice};
pub use problem::{GrowthData, Kernel, ModelError, ProblemInstance, Rhs};
