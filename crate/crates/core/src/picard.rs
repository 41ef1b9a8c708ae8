//! Successive approximations for the derivative `l = x'`.
//!
//! A solution of the integro-differential system is a fixed point of
//!
//! ```text
//! T(l)(t) = f(t, x(t), v(t)) - int_0^t Phi(t, tau, x(tau), u(tau)) d tau,   x = int_0^. l,
//! ```
//!
//! which is a contraction in the weighted norm
//! `||l||_k = (int_0^1 e^{-kt} |l|^2)^{1/2}` with ratio at most
//! `(L + M) / sqrt(k)` whenever `f` is `L`-Lipschitz and `Phi` is
//! `M`-Lipschitz in the state. Iteration stops on the weighted increment
//! `||l_{j+1} - l_j||_k`.

use rand::Rng;
use thiserror::Error;

use crate::grid::{
    bielecki_norm, cumtrapz, l2_norm, random_trig, DerivCoords, GridError, GridFunction, TimeGrid,
};
use crate::problem::{residual_f, ModelError, ProblemInstance};

/// Safety margin in the weight rule `k = 4 max(L, M)^2 (1 + margin)`.
pub const WEIGHT_MARGIN: f64 = 0.05;

/// Weight used when both Lipschitz constants vanish (the map is constant
/// and contracts in every weighted norm).
pub const FALLBACK_WEIGHT: f64 = 1.0;

/// Increments below this are too small for a meaningful ratio.
pub const RATIO_FLOOR: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PicardError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("iteration diverged (non-finite iterate at step {iteration})")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<GridError> for PicardError {
    fn from(e: GridError) -> Self {
        PicardError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightChoice {
    /// Derive `k` from the Lipschitz metadata via [`choose_k`].
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub k: WeightChoice,
    /// Threshold on the weighted increment (Picard) or on the gradient norm
    /// (descent).
    pub tol: f64,
    pub max_iter: usize,
    /// Starting derivative `l_0`; zero when `None`.
    pub initial: Option<GridFunction>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            k: WeightChoice::Auto,
            tol: 1e-10,
            max_iter: 500,
            initial: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), PicardError> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(PicardError::InvalidConfig(format!(
                "tolerance must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(PicardError::InvalidConfig(
                "max_iter must be at least 1".into(),
            ));
        }
        if let WeightChoice::Fixed(k) = self.k {
            if !(k > 0.0 && k.is_finite()) {
                return Err(PicardError::InvalidConfig(format!(
                    "weight k must be positive, got {k}"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn initial_for(
        &self,
        grid: TimeGrid,
        dim: usize,
    ) -> Result<GridFunction, PicardError> {
        match &self.initial {
            None => Ok(GridFunction::zeros(grid, dim)),
            Some(l0) if l0.grid() == grid && l0.dim() == dim => Ok(l0.clone()),
            Some(l0) if l0.grid() != grid => Err(ModelError::GridMismatch.into()),
            Some(l0) => Err(ModelError::DimensionMismatch {
                what: "initial iterate",
                expected: dim,
                got: l0.dim(),
            }
            .into()),
        }
    }
}

/// A self-map of sampled derivatives together with the Lipschitz constants
/// `(L, M)` of its local and memory parts.
pub trait FixedPointMap {
    fn grid(&self) -> TimeGrid;
    fn dim(&self) -> usize;
    fn apply(&self, l: &GridFunction) -> Result<GridFunction, ModelError>;
    fn lipschitz(&self) -> (f64, f64);
}

impl FixedPointMap for ProblemInstance {
    fn grid(&self) -> TimeGrid {
        ProblemInstance::grid(self)
    }

    fn dim(&self) -> usize {
        self.dim_n()
    }

    fn apply(&self, l: &GridFunction) -> Result<GridFunction, ModelError> {
        apply_t(self, l)
    }

    fn lipschitz(&self) -> (f64, f64) {
        (self.growth().lip_l(), self.growth().lip_m())
    }
}

/// `T(l)(t_i) = f(t_i, x_i, v_i) - int_0^{t_i} Phi(t_i, tau, x(tau), u(tau)) d tau`
/// with `x = cumtrapz(l)`.
pub fn apply_t(p: &ProblemInstance, l: &GridFunction) -> Result<GridFunction, ModelError> {
    p.check_state(l)?;
    let x = cumtrapz(l);
    let mut out = p.forcing_term(&x)?;
    out.axpy(-1.0, &p.memory_term(&x)?);
    Ok(out)
}

/// Weight `k = 4 max(L, M)^2 (1 + WEIGHT_MARGIN)`, which makes both
/// `L / sqrt(k)` and `M / sqrt(k)` strictly smaller than `1/2`.
///
/// One of the constants may be zero (a purely local or purely memory
/// nonlinearity); negative, non-finite or both-zero inputs are rejected.
pub fn choose_k(lip_l: f64, lip_m: f64) -> Result<f64, PicardError> {
    for (name, v) in [("L", lip_l), ("M", lip_m)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(PicardError::InvalidParameter(format!(
                "Lipschitz constant {name} must be nonnegative and finite, got {v}"
            )));
        }
    }
    let top = lip_l.max(lip_m);
    if top == 0.0 {
        return Err(PicardError::InvalidParameter(
            "at least one Lipschitz constant must be positive".into(),
        ));
    }
    Ok(4.0 * top * top * (1.0 + WEIGHT_MARGIN))
}

/// Resolves the weight for `map` under `cfg`.
pub fn resolve_k<M: FixedPointMap + ?Sized>(
    map: &M,
    cfg: &SolverConfig,
) -> Result<f64, PicardError> {
    match cfg.k {
        WeightChoice::Fixed(k) => Ok(k),
        WeightChoice::Auto => {
            let (l, m) = map.lipschitz();
            if l == 0.0 && m == 0.0 {
                Ok(FALLBACK_WEIGHT)
            } else {
                choose_k(l, m)
            }
        }
    }
}

/// Contraction bound `(L + M) / sqrt(k)`.
pub fn contraction_bound(lip_l: f64, lip_m: f64, k: f64) -> f64 {
    (lip_l + lip_m) / k.sqrt()
}

/// Iteration history of a fixed-point solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// `||l_{j+1} - l_j||_k` for every step taken.
    pub increments: Vec<f64>,
    /// `increments[j + 1] / increments[j]`, `None` when the denominator is
    /// below [`RATIO_FLOOR`].
    pub ratios: Vec<Option<f64>>,
    pub final_residual_l2: f64,
    pub converged: bool,
    pub k_used: f64,
    /// `(L + M) / sqrt(k)` from the metadata.
    pub contraction_bound: f64,
    /// `C` in `final_residual_l2 <= C * increment`: the residual of the last
    /// iterate is `T(l_j) - T(l_{j+1})`, so `C = e^{k/2} (L + M) / sqrt(k)`.
    pub residual_constant: f64,
}

impl SolveReport {
    pub fn max_ratio(&self) -> Option<f64> {
        self.ratios.iter().flatten().copied().reduce(f64::max)
    }

    pub fn last_increment(&self) -> Option<f64> {
        self.increments.last().copied()
    }
}

/// Step-by-step driver for `l_{j+1} = T(l_j)`.
pub struct FixedPointIteration<'a, M: FixedPointMap + ?Sized> {
    map: &'a M,
    k: f64,
    current: GridFunction,
    increments: Vec<f64>,
}

impl<'a, M: FixedPointMap + ?Sized> FixedPointIteration<'a, M> {
    pub fn new(map: &'a M, initial: GridFunction, k: f64) -> Result<Self, PicardError> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(PicardError::InvalidParameter(format!(
                "weight k must be positive, got {k}"
            )));
        }
        if initial.grid() != map.grid() {
            return Err(ModelError::GridMismatch.into());
        }
        Ok(Self {
            map,
            k,
            current: initial,
            increments: Vec::new(),
        })
    }

    /// Applies the map once and returns the weighted increment.
    pub fn step(&mut self) -> Result<f64, PicardError> {
        let next = self.map.apply(&self.current)?;
        if !next.is_finite() {
            return Err(PicardError::Diverged {
                iteration: self.increments.len() + 1,
            });
        }
        let inc = bielecki_norm(&(&next - &self.current), self.k)?;
        if !inc.is_finite() {
            return Err(PicardError::Diverged {
                iteration: self.increments.len() + 1,
            });
        }
        self.current = next;
        self.increments.push(inc);
        Ok(inc)
    }

    pub fn current(&self) -> &GridFunction {
        &self.current
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn into_parts(self) -> (GridFunction, Vec<f64>) {
        (self.current, self.increments)
    }
}

pub(crate) fn ratios_of(increments: &[f64]) -> Vec<Option<f64>> {
    increments
        .windows(2)
        .map(|w| (w[0] > RATIO_FLOOR).then(|| w[1] / w[0]))
        .collect()
}

/// Iterates `map` from `cfg.initial` until the weighted increment drops to
/// `cfg.tol` or `cfg.max_iter` steps are spent. The reported residual is
/// `||l - T(l)||_2` of the returned iterate.
pub fn run_fixed_point<M: FixedPointMap + ?Sized>(
    map: &M,
    cfg: &SolverConfig,
) -> Result<(GridFunction, SolveReport), PicardError> {
    cfg.validate()?;
    let k = resolve_k(map, cfg)?;
    let initial = cfg.initial_for(map.grid(), map.dim())?;
    let mut iter = FixedPointIteration::new(map, initial, k)?;
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        if iter.step()? <= cfg.tol {
            converged = true;
            break;
        }
    }
    let (l, increments) = iter.into_parts();
    let residual = l2_norm(&(&l - &map.apply(&l)?));
    let (lip_l, lip_m) = map.lipschitz();
    let bound = contraction_bound(lip_l, lip_m, k);
    let report = SolveReport {
        iterations: increments.len(),
        ratios: ratios_of(&increments),
        increments,
        final_residual_l2: residual,
        converged,
        k_used: k,
        contraction_bound: bound,
        residual_constant: (0.5 * k).exp() * bound,
    };
    Ok((l, report))
}

/// Solves the problem by successive approximations. Non-convergence within
/// `cfg.max_iter` is reported through `SolveReport::converged`, not as an
/// error.
pub fn picard_solve(
    p: &ProblemInstance,
    cfg: &SolverConfig,
) -> Result<(DerivCoords, SolveReport), PicardError> {
    let (l, mut report) = run_fixed_point(p, cfg)?;
    let x = DerivCoords::from_derivative(l);
    report.final_residual_l2 = l2_norm(&residual_f(p, &x)?);
    Ok((x, report))
}

/// Largest observed `||T(l1) - T(l2)||_k / ||l1 - l2||_k` over `trials`
/// random pairs of smooth functions.
pub fn verify_contraction<M: FixedPointMap + ?Sized>(
    map: &M,
    k: f64,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<f64, PicardError> {
    if trials == 0 {
        return Err(PicardError::InvalidParameter(
            "trials must be at least 1".into(),
        ));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(PicardError::InvalidParameter(format!(
            "weight k must be positive, got {k}"
        )));
    }
    let (grid, dim) = (map.grid(), map.dim());
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < trials {
        attempts += 1;
        if attempts > 100 * trials {
            return Err(PicardError::InvalidParameter(
                "could not draw non-degenerate pairs".into(),
            ));
        }
        let scale = rng.random_range(0.0..=5.0);
        let l1 = &random_trig(grid, dim, 6, rng) * scale;
        let gap = rng.random_range(1e-3..=5.0);
        let mut l2 = l1.clone();
        l2.axpy(gap, &random_trig(grid, dim, 6, rng));
        let denom = bielecki_norm(&(&l1 - &l2), k)?;
        if denom < RATIO_FLOOR {
            continue;
        }
        let num = bielecki_norm(&(&map.apply(&l1)? - &map.apply(&l2)?), k)?;
        worst = worst.max(num / denom);
        done += 1;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins::{self, KernelChoice, RhsChoice};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(kernel: KernelChoice, rhs: RhsChoice, n: usize, v: f64) -> ProblemInstance {
        builtins::instance(kernel, rhs, 1, n, |_| 0.0, |_| v).unwrap()
    }

    fn sin_oracle(n: usize) -> ProblemInstance {
        scalar(
            KernelChoice::LinearScaled(1.0),
            RhsChoice::Constant(1.0),
            n,
            0.0,
        )
    }

    #[test]
    fn choose_k_examples() {
        let k = choose_k(1.0, 1.0).unwrap();
        assert!((k - 4.2).abs() < 1e-12);
        assert!(1.0 / k.sqrt() < 0.5);
        assert!((choose_k(0.5, 0.1).unwrap() - 1.05).abs() < 1e-12);
        assert_eq!(choose_k(0.3, 0.7).unwrap(), choose_k(0.7, 0.3).unwrap());
        assert!((choose_k(0.0, 1.0).unwrap() - 4.2).abs() < 1e-12);
    }

    #[test]
    fn choose_k_rejects_bad_input() {
        assert!(choose_k(-1.0, 1.0).is_err());
        assert!(choose_k(0.0, 0.0).is_err());
        assert!(choose_k(f64::NAN, 1.0).is_err());
        assert!(choose_k(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SolverConfig::default();
        cfg.validate().unwrap();
        cfg.tol = 0.0;
        assert!(cfg.validate().is_err());
        cfg.tol = 1e-8;
        cfg.max_iter = 0;
        assert!(cfg.validate().is_err());
        cfg.max_iter = 1;
        cfg.k = WeightChoice::Fixed(-2.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn t_of_zero_problem_vanishes() {
        let p = scalar(KernelChoice::Zero, RhsChoice::Constant(0.0), 10, 0.0);
        let l = GridFunction::from_fn(p.grid(), 1, |t, o| o[0] = (3.0 * t).exp());
        assert_eq!(apply_t(&p, &l).unwrap().max_norm(), 0.0);
    }

    #[test]
    fn t_of_passthrough_is_control() {
        let p = scalar(KernelChoice::Zero, RhsChoice::Passthrough, 10, 1.0);
        let l = GridFunction::from_fn(p.grid(), 1, |t, o| o[0] = t * t - 4.0);
        let one = GridFunction::constant(p.grid(), &[1.0]);
        assert_eq!(apply_t(&p, &l).unwrap(), one);
        assert_eq!(apply_t(&p, &one).unwrap(), one);
    }

    #[test]
    fn cosine_is_nearly_fixed() {
        let p = sin_oracle(200);
        let l = GridFunction::from_fn(p.grid(), 1, |t, o| o[0] = t.cos());
        let gap = l2_norm(&(&apply_t(&p, &l).unwrap() - &l));
        assert!(gap <= 5e-4, "{gap}");
    }

    #[test]
    fn passthrough_converges_immediately() {
        let p = scalar(KernelChoice::Zero, RhsChoice::Passthrough, 20, 1.0);
        let (x, report) = picard_solve(&p, &SolverConfig::default()).unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 2);
        assert_eq!(report.k_used, FALLBACK_WEIGHT);
        assert_eq!(x.l(), &GridFunction::constant(p.grid(), &[1.0]));
    }

    #[test]
    fn sin_oracle_solution() {
        let p = sin_oracle(200);
        let cfg = SolverConfig {
            tol: 1e-10,
            ..SolverConfig::default()
        };
        let (x, report) = picard_solve(&p, &cfg).unwrap();
        assert!(report.converged);
        assert!((report.k_used - 4.2).abs() < 1e-12);
        let exact = GridFunction::from_fn(p.grid(), 1, |t, o| o[0] = t.sin());
        assert!(x.x().max_distance(&exact) <= 1e-4);
        assert!(
            report.final_residual_l2
                <= report.residual_constant * report.last_increment().unwrap() + 1e-15
        );
    }

    #[test]
    fn unique_solution_from_many_starts() {
        let p = scalar(
            KernelChoice::ExpNonconv(1.0, 1.0),
            RhsChoice::Saturating(1.0),
            100,
            0.0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (reference, _) = picard_solve(&p, &SolverConfig::default()).unwrap();
        for _ in 0..10 {
            let mut l0 = random_trig(p.grid(), 1, 5, &mut rng);
            let norm = l2_norm(&l0);
            l0 = &l0 * (rng.random_range(0.0..=5.0) / norm);
            let cfg = SolverConfig {
                initial: Some(l0),
                ..SolverConfig::default()
            };
            let (x, report) = picard_solve(&p, &cfg).unwrap();
            assert!(report.converged);
            assert!(x.x().max_distance(reference.x()) <= 1e-6);
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let p = sin_oracle(50);
        let cfg = SolverConfig {
            max_iter: 2,
            tol: 1e-14,
            ..SolverConfig::default()
        };
        let (_, report) = picard_solve(&p, &cfg).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 2);
    }

    #[test]
    fn blow_up_is_divergence() {
        // Dishonest metadata: the rhs slope is far above what the fixed
        // weight can absorb, so iterates grow until they overflow.
        let p = scalar(KernelChoice::Zero, RhsChoice::Affine(1e3, 0.0), 4, 1.0);
        let cfg = SolverConfig {
            k: WeightChoice::Fixed(1.0),
            max_iter: 500,
            ..SolverConfig::default()
        };
        assert!(matches!(
            picard_solve(&p, &cfg),
            Err(PicardError::Diverged { .. })
        ));
    }

    #[test]
    fn increments_decay_geometrically() {
        for (kernel, rhs) in [
            (KernelChoice::LinearScaled(1.0), RhsChoice::Constant(1.0)),
            (
                KernelChoice::ExpNonconv(1.0, 1.0),
                RhsChoice::Saturating(1.0),
            ),
            (
                KernelChoice::LinearControl(0.3, 1.0),
                RhsChoice::Affine(0.8, 0.2),
            ),
        ] {
            let p = builtins::instance(kernel, rhs, 1, 100, |t| t.sin(), |t| 1.0 - t).unwrap();
            let (_, report) = picard_solve(&p, &SolverConfig::default()).unwrap();
            let q = report.contraction_bound + 0.05;
            assert!(q < 1.0);
            for w in report.increments.windows(2).skip(1) {
                if w[0] > 1e-12 {
                    assert!(w[1] <= q * w[0], "{kernel:?}: {} > {q} * {}", w[1], w[0]);
                }
            }
        }
    }

    #[test]
    fn fixed_point_residual_consistency() {
        let p = scalar(
            KernelChoice::ExpNonconv(0.8, 2.0),
            RhsChoice::Saturating(1.5),
            60,
            0.3,
        );
        let l = GridFunction::from_fn(p.grid(), 1, |t, o| o[0] = (2.0 * t).sin() - 0.5);
        let r = residual_f(&p, &DerivCoords::from_derivative(l.clone())).unwrap();
        let gap = &apply_t(&p, &l).unwrap() - &l;
        assert!((l2_norm(&r) - l2_norm(&gap)).abs() <= 1e-12);
    }

    #[test]
    fn grid_refinement_is_second_order() {
        let p = scalar(
            KernelChoice::ExpNonconv(1.0, 1.0),
            RhsChoice::Saturating(1.0),
            50,
            0.0,
        );
        let (coarse, _) = picard_solve(&p, &SolverConfig::default()).unwrap();
        let p2 = scalar(
            KernelChoice::ExpNonconv(1.0, 1.0),
            RhsChoice::Saturating(1.0),
            100,
            0.0,
        );
        let (fine, _) = picard_solve(&p2, &SolverConfig::default()).unwrap();
        let gap = (0..=50)
            .map(|i| (coarse.x().node(i)[0] - fine.x().node(2 * i)[0]).abs())
            .fold(0.0, f64::max);
        assert!(gap <= 5.0 / (50.0 * 50.0), "{gap}");
    }

    #[test]
    fn weight_does_not_move_the_fixed_point() {
        let p = scalar(
            KernelChoice::ExpNonconv(1.0, 1.0),
            RhsChoice::Saturating(1.0),
            100,
            0.2,
        );
        let k = resolve_k(&p, &SolverConfig::default()).unwrap();
        let tol = 1e-10;
        let solve = |k| {
            let cfg = SolverConfig {
                k: WeightChoice::Fixed(k),
                tol,
                ..SolverConfig::default()
            };
            picard_solve(&p, &cfg).unwrap().0
        };
        assert!(solve(k).x().max_distance(solve(2.0 * k).x()) <= 10.0 * tol);
    }

    #[test]
    fn contraction_of_constant_map_is_zero() {
        let p = scalar(KernelChoice::Zero, RhsChoice::Constant(2.0), 20, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(verify_contraction(&p, 1.0, 10, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn contraction_of_linear_kernel() {
        let p = sin_oracle(100);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ratio = verify_contraction(&p, 4.2, 50, &mut rng).unwrap();
        assert!(ratio > 0.0);
        assert!(ratio <= 1.0 / 4.2f64.sqrt() + 0.05);
    }

    #[test]
    fn doubling_weight_shrinks_observed_ratio() {
        // The memory part of the linear kernel is a double integral, whose
        // weighted norm falls off faster than the 1/sqrt(k) of the general
        // estimate; check at least that rate.
        let p = sin_oracle(100);
        let ratio = |k: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            verify_contraction(&p, k, 200, &mut rng).unwrap()
        };
        let (r1, r2) = (ratio(4.2), ratio(8.4));
        assert!(
            r2 / r1 <= std::f64::consts::FRAC_1_SQRT_2 + 0.1,
            "{r1} -> {r2}"
        );
    }

    #[test]
    fn verify_contraction_rejects_bad_input() {
        let p = sin_oracle(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(verify_contraction(&p, 1.0, 0, &mut rng).is_err());
        assert!(verify_contraction(&p, 0.0, 3, &mut rng).is_err());
    }
}
