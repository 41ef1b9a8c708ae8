//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed; the
//! process exits non-zero when any criterion fails.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volterra_ide::builtins::{self, KernelChoice, RhsChoice};
use volterra_ide::config::{load_problem, PRESETS};
use volterra_ide::grid::{l2_norm, random_trig, DerivCoords, GridFunction};
use volterra_ide::picard::{
    choose_k, contraction_bound, picard_solve, resolve_k, verify_contraction, SolverConfig,
    WeightChoice,
};
use volterra_ide::problem::{apply_fuv, apply_fx, GrowthNorms, ProblemInstance};
use volterra_ide::sensitivity::{
    fd_directional, sensitivity_solve, validate_sensitivity, Perturbation,
};
use volterra_ide::variational::{
    check_condition, coercivity_coefficients, coercivity_probe, descent_solve, phi, phi_gradient,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);

fn ensure(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn scalar(kernel: KernelChoice, rhs: RhsChoice, n: usize) -> ProblemInstance {
    builtins::instance(kernel, rhs, 1, n, |_| 0.0, |_| 0.0).unwrap()
}

fn preset(name: &str) -> ProblemInstance {
    load_problem(&format!("builtin:{name}")).unwrap()
}

fn sin_error(n: usize) -> f64 {
    let p = scalar(KernelChoice::LinearScaled(1.0), RhsChoice::Constant(1.0), n);
    let (x, _) = picard_solve(&p, &SolverConfig::default()).unwrap();
    let exact = GridFunction::from_fn(p.grid(), 1, |t, o| o[0] = t.sin());
    x.x().max_distance(&exact)
}

fn c1_sin_oracle() -> Outcome {
    let start = Instant::now();
    let p = scalar(
        KernelChoice::LinearScaled(1.0),
        RhsChoice::Constant(1.0),
        200,
    );
    let cfg = SolverConfig {
        tol: 1e-10,
        ..SolverConfig::default()
    };
    let (x, report) = picard_solve(&p, &cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let exact = GridFunction::from_fn(p.grid(), 1, |t, o| o[0] = t.sin());
    let err = x.x().max_distance(&exact);
    ensure(report.converged, "not converged".into())?;
    ensure(err <= 1e-4, format!("max error {err:e} > 1e-4"))?;
    ensure(
        elapsed < Duration::from_secs(1),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "max error {err:.3e}, {} iterations, {elapsed:?}",
        report.iterations
    ))
}

fn c2_quadrature_order() -> Outcome {
    let errs: Vec<f64> = [100, 200, 400].into_iter().map(sin_error).collect();
    let ratios = [errs[0] / errs[1], errs[1] / errs[2]];
    for r in ratios {
        ensure(
            (3.2..=4.8).contains(&r),
            format!("ratio {r:.3} outside [3.2, 4.8]"),
        )?;
    }
    Ok(format!(
        "errors {:.3e} {:.3e} {:.3e}, ratios {ratios:.3?}",
        errs[0], errs[1], errs[2]
    ))
}

/// Scalar and vector instances covering every builtin kernel and rhs.
fn all_builtins() -> Vec<(String, ProblemInstance)> {
    let mut out: Vec<(String, ProblemInstance)> = PRESETS
        .iter()
        .map(|(name, _)| (name.to_string(), preset(name)))
        .collect();
    let extra = [
        (KernelChoice::LinearScaled(1.0), RhsChoice::Affine(1.0, 0.5)),
        (
            KernelChoice::ExpNonconv(-0.8, 2.0),
            RhsChoice::Saturating(2.0),
        ),
        (
            KernelChoice::LinearControl(1.0, 1.0),
            RhsChoice::Passthrough,
        ),
        (KernelChoice::Zero, RhsChoice::Saturating(1.0)),
    ];
    for (k, r) in extra {
        let p = builtins::instance(k, r, 2, 100, |t| (2.0 * t).cos(), |t| t).unwrap();
        out.push((format!("{} + {}", k.name(), r.name()), p));
    }
    out
}

fn c3_contraction() -> Outcome {
    // (L + M)/sqrt(k) itself must be a contraction; observations get the
    // 0.05 sampling slack on top.
    let unit = 2.0 / choose_k(1.0, 1.0).unwrap().sqrt();
    let linear = 1.0 / choose_k(0.0, 1.0).unwrap().sqrt() + 0.05;
    ensure(
        (unit - 0.976).abs() < 1e-3,
        format!("L = M = 1 bound {unit}"),
    )?;
    ensure(
        (linear - 0.538).abs() < 1e-3,
        format!("linear bound {linear}"),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = (String::new(), 0.0f64, 0.0f64);
    for (name, p) in all_builtins() {
        let cfg = SolverConfig::default();
        let k = resolve_k(&p, &cfg).map_err(|e| e.to_string())?;
        let (l, m) = (p.growth().lip_l(), p.growth().lip_m());
        let bound = contraction_bound(l, m, k);
        ensure(bound < 1.0, format!("{name}: bound {bound} >= 1"))?;
        let q = bound + 0.05;
        let (_, report) = picard_solve(&p, &cfg).map_err(|e| e.to_string())?;
        let observed = report.max_ratio().unwrap_or(0.0);
        let sampled = verify_contraction(&p, k, 30, &mut rng).map_err(|e| e.to_string())?;
        ensure(
            observed <= q,
            format!("{name}: increment ratio {observed} > {q}"),
        )?;
        ensure(
            sampled <= q,
            format!("{name}: sampled ratio {sampled} > {q}"),
        )?;
        ensure(
            observed < 1.0 && sampled < 1.0,
            format!("{name}: ratio >= 1"),
        )?;
        if observed.max(sampled) / q > worst.1 / worst.2.max(1e-300) {
            worst = (name, observed.max(sampled), q);
        }
    }
    Ok(format!(
        "bounds {unit:.3} (L=M=1) / {linear:.3} (linear) reproduced; tightest: {} observed {:.3} vs {:.3}",
        worst.0, worst.1, worst.2
    ))
}

fn c4_condition() -> Outcome {
    let c = check_condition(&GrowthNorms {
        norm_a: 0.3,
        s_f: 0.1,
        ..GrowthNorms::zero()
    });
    ensure(
        (c.lhs - 0.56).abs() < 1e-15 && c.passed,
        format!("example lhs {}", c.lhs),
    )?;
    ensure(
        c.threshold == 0.5f64.sqrt(),
        format!("threshold {}", c.threshold),
    )?;
    let boundary = check_condition(&GrowthNorms {
        norm_a: FRAC_1_SQRT_2,
        ..GrowthNorms::zero()
    });
    ensure(!boundary.passed, "boundary case passes".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut disagreements = 0;
    let mut passes = 0;
    for _ in 0..500 {
        let g = GrowthNorms {
            norm_a: rng.random_range(0.0..1.2),
            norm_b: rng.random_range(0.0..3.0),
            norm_a_f: rng.random_range(0.0..3.0),
            norm_b_f: rng.random_range(0.0..3.0),
            s_f: rng.random_range(0.0..0.5),
        };
        let check = check_condition(&g);
        let lhs = g.norm_a + 2.0 * g.s_f * (1.0 + g.norm_a);
        let bound =
            coercivity_coefficients(&g, rng.random_range(1.0..4.0), rng.random_range(1.0..9.0));
        if check.lhs != lhs
            || check.passed != (lhs < FRAC_1_SQRT_2)
            || (bound.c2 > 0.0) != check.passed
        {
            disagreements += 1;
        }
        passes += check.passed as usize;
    }
    ensure(disagreements == 0, format!("{disagreements} disagreements"))?;
    Ok(format!(
        "0 disagreements over 500 tuples ({passes} passing)"
    ))
}

fn c5_probe() -> Outcome {
    let p = preset("coercive_linear");
    let c = check_condition(&p.growth().norms());
    ensure(
        (p.growth().norms().norm_a - 0.3).abs() < 1e-12
            && (p.growth().norms().s_f - 0.1).abs() < 1e-12,
        "preset norms are not (0.3, 0.1)".into(),
    )?;
    ensure(c.passed, "condition fails".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let probe = coercivity_probe(&p, 100, 10.0, &mut rng).map_err(|e| e.to_string())?;
    ensure(
        probe.violations == 0,
        format!("{} violations", probe.violations),
    )?;
    Ok(format!(
        "0 violations in 100 samples; C2 = {:.4}, min slack {:.3e}",
        probe.bound.c2, probe.min_slack
    ))
}

fn c6_gradient() -> Outcome {
    let problems = [
        preset("nonlinear"),
        preset("linear_control"),
        preset("sin_oracle"),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for p in &problems {
        let n = p.dim_n();
        let x = DerivCoords::from_derivative(random_trig(p.grid(), n, 4, &mut rng));
        let g = phi_gradient(p, &x).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let h = random_trig(p.grid(), n, 4, &mut rng);
            let exact: f64 = g.values().iter().zip(h.values()).map(|(a, b)| a * b).sum();
            let at = |s: f64| {
                let mut l = x.l().clone();
                l.axpy(s, &h);
                phi(p, &DerivCoords::from_derivative(l)).unwrap()
            };
            let fd = (at(eps) - at(-eps)) / (2.0 * eps);
            worst = worst.max((exact - fd).abs() / (1.0 + exact.abs()));
        }
    }
    ensure(worst <= 1e-6, format!("relative error {worst:e}"))?;
    Ok(format!("60 directions, worst relative error {worst:.2e}"))
}

fn c7_uniqueness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut summary = Vec::new();
    for (name, _) in PRESETS {
        let p = preset(name);
        if !check_condition(&p.growth().norms()).passed {
            continue;
        }
        let cfg = SolverConfig::default();
        let (reference, _) = picard_solve(&p, &cfg).map_err(|e| e.to_string())?;
        let value = phi(&p, &reference).map_err(|e| e.to_string())?;
        ensure(value <= 1e-8, format!("{name}: phi = {value:e}"))?;
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let shape = random_trig(p.grid(), p.dim_n(), 5, &mut rng);
            let scale = rng.random_range(0.0..=5.0) / l2_norm(&shape);
            let cfg = SolverConfig {
                initial: Some(&shape * scale),
                ..SolverConfig::default()
            };
            let (x, r) = picard_solve(&p, &cfg).map_err(|e| e.to_string())?;
            ensure(
                r.converged,
                format!("{name}: random start did not converge"),
            )?;
            worst = worst.max(x.x().max_distance(reference.x()));
        }
        let (xd, rd) = descent_solve(&p, &cfg).map_err(|e| e.to_string())?;
        ensure(rd.converged, format!("{name}: descent did not converge"))?;
        worst = worst.max(xd.x().max_distance(reference.x()));
        ensure(worst <= 1e-6, format!("{name}: spread {worst:e}"))?;
        summary.push(format!("{name} {worst:.1e}"));
    }
    ensure(
        summary.len() >= 3,
        "too few condition-satisfying presets".into(),
    )?;
    Ok(format!("spread: {}", summary.join(", ")))
}

fn smooth_pert(p: &ProblemInstance, seed: u64) -> Perturbation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Perturbation::new(
        random_trig(p.grid(), p.dim_m(), 3, &mut rng),
        random_trig(p.grid(), p.dim_r(), 3, &mut rng),
    )
    .unwrap()
}

fn c8_sensitivity() -> Outcome {
    let cfg = SolverConfig::default();
    let mut worst_lin = 0.0f64;
    for name in ["nonlinear", "linear_control", "coercive_linear"] {
        let p = preset(name);
        let (x, _) = picard_solve(&p, &cfg).map_err(|e| e.to_string())?;
        let pert = smooth_pert(&p, 8);
        let z = sensitivity_solve(&p, &x, &pert, &cfg)
            .map_err(|e| e.to_string())?
            .z;
        let mut lhs = apply_fx(&p, &x, &z).map_err(|e| e.to_string())?;
        lhs.axpy(
            1.0,
            &apply_fuv(&p, &x, &pert.du, &pert.dv).map_err(|e| e.to_string())?,
        );
        let r = l2_norm(&lhs);
        ensure(
            r <= 10.0 * cfg.tol,
            format!("{name}: linearized residual {r:e}"),
        )?;
        worst_lin = worst_lin.max(r);
    }

    let mut worst_fd = 0.0f64;
    for name in ["linear_control", "coercive_linear"] {
        let p = preset(name);
        let (x, _) = picard_solve(&p, &cfg).map_err(|e| e.to_string())?;
        let pert = smooth_pert(&p, 9);
        let z = sensitivity_solve(&p, &x, &pert, &cfg)
            .map_err(|e| e.to_string())?
            .z;
        for eps in [1.0, 1e-2, 1e-4, 1e-6] {
            let fd = fd_directional(&p, &pert, eps, &cfg).map_err(|e| e.to_string())?;
            let gap = fd.x().max_distance(z.x());
            ensure(
                gap <= 2.0 * cfg.tol,
                format!("{name}, eps {eps}: |fd - z| = {gap:e}"),
            )?;
            worst_fd = worst_fd.max(gap);
        }
    }

    let p = preset("nonlinear");
    let table = validate_sensitivity(&p, &smooth_pert(&p, 10), &[1e-2, 5e-3, 2.5e-3], &cfg)
        .map_err(|e| e.to_string())?;
    let ratios = table.ratios();
    for r in &ratios {
        ensure((1.5..=2.5).contains(r), format!("halving ratio {r:.3}"))?;
    }
    Ok(format!(
        "residual <= {worst_lin:.1e}; linear |fd - z| <= {worst_fd:.1e}; nonlinear ratios {ratios:.3?}"
    ))
}

fn c9_k_invariance() -> Outcome {
    let mut worst = 0.0f64;
    for (name, p) in all_builtins() {
        let base = SolverConfig::default();
        let k = resolve_k(&p, &base).map_err(|e| e.to_string())?;
        let solve = |k: f64| {
            let cfg = SolverConfig {
                k: WeightChoice::Fixed(k),
                ..SolverConfig::default()
            };
            picard_solve(&p, &cfg).map(|(x, _)| x)
        };
        let (a, b) = (
            solve(k).map_err(|e| e.to_string())?,
            solve(2.0 * k).map_err(|e| e.to_string())?,
        );
        let gap = a.x().max_distance(b.x());
        ensure(gap <= 10.0 * base.tol, format!("{name}: gap {gap:e}"))?;
        worst = worst.max(gap);
    }
    Ok(format!("max gap {worst:.1e} <= 1e-9"))
}

fn run_cli(args: &[&str], dir: &std::path::Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_volterra-ide"))
        .args(args)
        .current_dir(dir)
        .env_remove("VOLTERRA_IDE_OUT_DIR")
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap_or(-1)
}

fn c10_cli(suite_start: Instant) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let bad = d.join("bad.toml");
    fs::write(&bad, "name = \"bad\"\ngrid_n = [\n").unwrap();
    let slow = d.join("slow.toml");
    fs::write(
        &slow,
        "name = \"slow\"\ngrid_n = 50\n[kernel]\nkind = \"linear_scaled\"\nparams = [1.0]\n\
         [rhs]\nkind = \"constant\"\nparams = [1.0]\n[solver]\ntol = 1e-14\nmax_iter = 1\n",
    )
    .unwrap();
    let codes = [
        (
            run_cli(&["solve", "builtin:sin_oracle", "--out", "ok.csv"], d),
            0,
            "solve",
        ),
        (
            run_cli(&["solve", bad.to_str().unwrap(), "--out", "bad.csv"], d),
            1,
            "malformed",
        ),
        (
            run_cli(&["solve", slow.to_str().unwrap(), "--out", "slow.csv"], d),
            2,
            "non-convergence",
        ),
        (
            run_cli(&["check", "builtin:coercive_linear"], d),
            0,
            "check pass",
        ),
        (
            run_cli(&["check", "builtin:linear_violating"], d),
            3,
            "check fail",
        ),
        (
            run_cli(
                &[
                    "sweep",
                    "builtin:sin_oracle",
                    "--param",
                    "grid_n",
                    "--values",
                    "",
                ],
                d,
            ),
            1,
            "empty sweep",
        ),
    ];
    for (got, want, what) in codes {
        ensure(got == want, format!("{what}: exit {got}, expected {want}"))?;
    }
    ensure(
        !d.join("bad.csv").exists(),
        "malformed config produced output".into(),
    )?;

    let mut first = Vec::new();
    for round in 0..2 {
        let out = format!("sens{round}.csv");
        let code = run_cli(
            &[
                "--seed",
                "42",
                "sensitivity",
                "builtin:nonlinear",
                "--du",
                "random:4",
                "--dv",
                "sine:1,2",
                "--eps",
                "1e-4",
                "--out",
                &out,
            ],
            d,
        );
        ensure(code == 0, format!("sensitivity exit {code}"))?;
        let bytes = fs::read(d.join(&out)).unwrap();
        if round == 0 {
            first = bytes;
        } else {
            ensure(
                bytes == first,
                "sensitivity CSV differs between runs".into(),
            )?;
        }
    }
    run_cli(&["solve", "builtin:sin_oracle", "--out", "ok2.csv"], d);
    ensure(
        fs::read(d.join("ok.csv")).unwrap() == fs::read(d.join("ok2.csv")).unwrap(),
        "solve CSV differs between runs".into(),
    )?;
    let elapsed = suite_start.elapsed();
    ensure(
        elapsed < Duration::from_secs(120),
        format!("acceptance run took {elapsed:?}"),
    )?;
    Ok(format!(
        "exit codes 0/1/2/3 as documented; CSV byte-identical; acceptance run {elapsed:.1?}"
    ))
}

fn main() {
    let start = Instant::now();
    let criteria: Vec<Criterion> = vec![
        ("sin oracle", Box::new(c1_sin_oracle)),
        ("quadrature order", Box::new(c2_quadrature_order)),
        ("contraction certificate", Box::new(c3_contraction)),
        ("hypothesis checker", Box::new(c4_condition)),
        ("coercivity probe", Box::new(c5_probe)),
        ("gradient exactness", Box::new(c6_gradient)),
        ("existence/uniqueness", Box::new(c7_uniqueness)),
        ("sensitivity", Box::new(c8_sensitivity)),
        ("k-invariance", Box::new(c9_k_invariance)),
        ("CLI contract", Box::new(move || c10_cli(start))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
