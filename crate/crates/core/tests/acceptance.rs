//! Acceptance criteria 1-9. Each criterion prints one `PASS`/`FAIL` line
//! with its measured values. The process exits nonzero on failure only when
//! `HJBFEM_ACCEPTANCE_STRICT=1`; `HJBFEM_ACCEPTANCE=3,7` selects criteria.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{Matrix2, Point2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hjbfem::control::{select_lambda, CoefficientFamily, Coefficients, ControlGrid, SampleGrid};
use hjbfem::effective::{
    linear_oracle, relative_errors, solve_effective, HamiltonianMode, OptimizerConfig,
    ResidualNodes, TwoScaleConfig,
};
use hjbfem::estimator::estimate;
use hjbfem::experiments::{
    estimate_rate, benchmark_r, run_exp1_h, run_exp1_sigma, run_exp2, ExperimentConfig, ExperimentKind,
};
use hjbfem::fem::{Constraint, FeFunction, FunctionSpace};
use hjbfem::homogenization::{exact_h, solve_cell, CellProblemSpec};
use hjbfem::mesh::{Mesh, MeshFlavor};
use hjbfem::mixed::{MixedConfig, MixedProblem};

const SEED: u64 = 20_240_601;

type Criterion = (usize, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn fmt(v: &[f64]) -> String {
    let cells: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", cells.join(", "))
}

fn criterion_1() -> Outcome {
    let fam = CoefficientFamily::by_name("fo-benchmark").unwrap();
    let t = Instant::now();
    let cert = select_lambda(&fam, &SampleGrid::new(128)).unwrap();
    let el = t.elapsed();
    outcome(
        cert.delta >= 0.05 && cert.margin >= 0.0 && within(el, 5.0),
        format!(
            "lambda = {:.5}, delta = {:.5}, slack = {:.2e}, {} x {} controls, {:.2} s",
            cert.lambda,
            cert.delta,
            cert.margin,
            cert.sample_description,
            fam.controls().len(),
            el.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    let mut count = 0;
    for n in [4, 8, 16] {
        let mesh = Arc::new(Mesh::uniform(n, MeshFlavor::Periodic).unwrap());
        let space = FunctionSpace::new(mesh, 1, 2, Constraint::None).unwrap();
        for _ in 0..100 {
            let c: Vec<f64> = (0..space.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let w = FeFunction::new(space.clone(), c).unwrap();
            let (mut jac, mut rot, mut div) = (0.0, 0.0, 0.0);
            for q in w.eval_at_qp(2).unwrap().iter().flatten() {
                jac += q.weight * q.jacobian.norm_squared();
                rot += q.weight * q.rot().powi(2);
                div += q.weight * q.divergence().powi(2);
            }
            worst = worst.max((jac - rot - div).abs() / jac);
            count += 1;
        }
    }
    outcome(
        worst <= 1e-10,
        format!("{count} fields on N = 4, 8, 16; max relative defect {worst:.2e}"),
    )
}

/// Random element of `X_h` with zero-mean `w` components.
fn random_pair(p: &MixedProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let nw = p.w_space().n_dofs();
    let mut x: Vec<f64> = (0..p.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    for c in 0..2 {
        let s = &mut x[c * nw..(c + 1) * nw];
        let mean = s.iter().sum::<f64>() / nw as f64;
        s.iter_mut().for_each(|v| *v -= mean);
    }
    x
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let fam = CoefficientFamily::by_name("fo-benchmark").unwrap();
    let cert = select_lambda(&fam, &SampleGrid::default()).unwrap();
    let p = MixedProblem::new(fam, cert, 8, MixedConfig::default()).unwrap();
    let k = *p.constants();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let (mut mono_slack, mut lip_slack) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..100 {
        let x = random_pair(&p, &mut rng);
        let y = random_pair(&p, &mut rng);
        let z = random_pair(&p, &mut rng);
        let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let nd = p.triple_norm_squared(&d);
        let nz = p.triple_norm_squared(&z);
        // slacks normalised to unit |||x - y||| and |||z|||
        let mono = p.semilinear_form(&x, &d).unwrap() - p.semilinear_form(&y, &d).unwrap();
        mono_slack = mono_slack.min(mono / nd - k.c_m);
        let lip = (p.semilinear_form(&x, &z).unwrap() - p.semilinear_form(&y, &z).unwrap()).abs();
        lip_slack = lip_slack.min(k.c_l - lip / (nd * nz).sqrt());
    }
    let el = t.elapsed();
    outcome(
        mono_slack >= -1e-10 && lip_slack >= -1e-10 && within(el, 30.0),
        format!(
            "100 triples on N = 8; C_M = {:.4}, min slack {mono_slack:.3e}; C_L = {:.4}, min slack {lip_slack:.3e}; {:.2} s",
            k.c_m,
            k.c_l,
            el.as_secs_f64()
        ),
    )
}

fn manufactured_exact(y: &Point2<f64>) -> (f64, Vector2<f64>, Matrix2<f64>) {
    let k = 2.0 * PI;
    let (c1, s1) = ((k * y.x).cos(), (k * y.x).sin());
    let (c2, s2) = ((k * y.y).cos(), (k * y.y).sin());
    (
        c1 * c2,
        Vector2::new(-k * s1 * c2, -k * c1 * s2),
        Matrix2::new(
            -k * k * c1 * c2,
            k * k * s1 * s2,
            k * k * s1 * s2,
            -k * k * c1 * c2,
        ),
    )
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let fam = CoefficientFamily::by_name("manufactured").unwrap();
    let cert = select_lambda(&fam, &SampleGrid::default()).unwrap();
    let ns = [8usize, 16, 32, 64];
    let (mut errs, mut roots) = (Vec::new(), Vec::new());
    let (mut reliable, mut efficient) = (true, true);
    for &n in &ns {
        let p = MixedProblem::new(fam.clone(), cert.clone(), n, MixedConfig::default()).unwrap();
        let s = p.howard_solve(1e-10, 5).unwrap();
        let est = estimate(&p, &s, MixedConfig::default().quad_degree).unwrap();
        let e = p.error_norm(&s, manufactured_exact);
        reliable &= e * e <= est.reliability_bound(p.constants());
        efficient &= est.efficiency_lhs() <= p.constants().efficiency_factor() * e * e;
        errs.push(e);
        roots.push(est.sqrt_eta);
    }
    let hs: Vec<f64> = ns.iter().map(|&n| 2f64.sqrt() / n as f64).collect();
    let rate = |v: &[f64]| {
        estimate_rate(
            &hs.iter()
                .copied()
                .zip(v.iter().copied())
                .collect::<Vec<_>>(),
        )
        .unwrap()
    };
    let (se, sr) = (rate(&errs), rate(&roots));
    let band = |s: f64| (0.85..=1.15).contains(&s);
    let el = t.elapsed();
    outcome(
        band(se) && band(sr) && reliable && efficient && within(el, 120.0),
        format!(
            "error {} slope {se:.3}; sqrt(eta) {} slope {sr:.3}; reliability {reliable}, efficiency {efficient}; {:.1} s",
            fmt(&errs),
            fmt(&roots),
            el.as_secs_f64()
        ),
    )
}

/// Harmonic mean of `a0 + a1` by the midpoint rule on a `512 x 512` grid,
/// spectrally accurate for this smooth periodic integrand.
fn harmonic_mean_oracle() -> f64 {
    let m = 512;
    let mut inv = 0.0;
    for i in 0..m {
        for j in 0..m {
            let y1 = (i as f64 + 0.5) / m as f64;
            let y2 = (j as f64 + 0.5) / m as f64;
            inv += 1.0 / (2.0 + (2.0 * PI * y1).sin().powi(2) * (2.0 * PI * y2).cos().powi(2));
        }
    }
    (m * m) as f64 / inv
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let fam = CoefficientFamily::by_name("fo-benchmark").unwrap();
    let pinned = 18.0 * harmonic_mean_oracle() - 1.0;
    let h = exact_h(&fam, &benchmark_r()).unwrap();
    let cfg = ExperimentConfig::resolve(ExperimentKind::Exp1H, None, []).unwrap();
    let (rec, _) = run_exp1_h(&cfg).unwrap();
    let errs = rec.column("rel_error").unwrap();
    let slope = rec.slope("rel_error").unwrap_or(f64::NAN);
    let el = t.elapsed();
    outcome(
        (h - pinned).abs() <= 1e-9 * pinned.abs()
            && errs.len() == cfg.ns.len()
            && decreasing(&errs)
            && slope >= 2.0
            && within(el, 180.0),
        format!(
            "H(R) = {h:.7} (oracle {pinned:.7}); sigma = 0.01, N = 4..64: rel. error {} slope {slope:.3} (required >= 2); sqrt(eta) slope {:.3}; {:.1} s",
            fmt(&errs),
            rec.slope("sqrt_eta").unwrap_or(f64::NAN),
            el.as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig::resolve(ExperimentKind::Exp1Sigma, None, []).unwrap();
    let (rec, _) = run_exp1_sigma(&cfg).unwrap();
    let errs = rec.column("rel_error").unwrap();
    let slope = rec.slope("rel_error").unwrap_or(f64::NAN);
    let el = t.elapsed();
    outcome(
        (0.8..=1.2).contains(&slope) && within(el, 180.0),
        format!(
            "N = 32, sigma = 4..1/64: rel. error {}; pre-floor rows {}, slope {slope:.3}; floor-subtracted slope {} (diagnostic); {:.1} s",
            fmt(&errs),
            rec.diagnostics["pre_floor_rows"],
            rec.diagnostics["floor_subtracted_slope"],
            el.as_secs_f64()
        ),
    )
}

fn criterion_7() -> Outcome {
    let controls = ControlGrid::uniform(5).unwrap();
    let coeffs = |alpha: f64| Coefficients {
        a: Matrix2::new(2.0 + alpha, 0.3 * alpha, 0.3 * alpha, 1.5 - 0.5 * alpha),
        b: Vector2::new(alpha - 0.5, 0.25),
        c: 1.0,
        f: 1.0 - alpha * alpha,
    };
    let fam = CoefficientFamily::new("constant", controls.clone(), move |_, _, a| coeffs(a));
    let cert = select_lambda(&fam, &SampleGrid::new(8)).unwrap();
    let s = Point2::new(0.2, 0.7);
    let p = Vector2::new(0.4, -1.1);
    let r = Matrix2::new(-1.0, 0.5, 0.5, 2.0);
    let expected = controls
        .values()
        .iter()
        .map(|&a| {
            let k = coeffs(a);
            -k.a.component_mul(&r).sum() - k.b.dot(&p) - k.f
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let mut worst = 0.0f64;
    for n in [4, 16] {
        for sigma in [1.0, 0.01] {
            let spec = CellProblemSpec::new(s, p, r, sigma).unwrap();
            let v = solve_cell(&fam, &cert, &spec, n, 1e-12, 20).unwrap().value;
            worst = worst.max((v - expected).abs());
        }
    }
    outcome(
        worst <= 1e-10,
        format!("sup = {expected:.12}; max deviation over N in {{4, 16}}, sigma in {{1, 0.01}}: {worst:.2e}"),
    )
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig::resolve(ExperimentKind::Exp2, None, ["modes=exact"]).unwrap();
    let out = run_exp2(&cfg).unwrap();
    let el = t.elapsed();
    let rec = &out.record;
    let (l2, linf) = (
        rec.column("l2_exact").unwrap(),
        rec.column("linf_exact").unwrap(),
    );
    let (s2, sinf) = (
        rec.slope("l2_exact").unwrap_or(f64::NAN),
        rec.slope("linf_exact").unwrap_or(f64::NAN),
    );
    let pass = rec.converged()
        && decreasing(&l2)
        && decreasing(&linf)
        && s2 >= 1.0
        && sinf >= 1.0
        && within(el, 1200.0);

    // same experiment with the residual restricted to interior vertices
    let alt = ExperimentConfig::resolve(
        ExperimentKind::Exp2,
        None,
        ["modes=exact", "residual_nodes=interior"],
    )
    .unwrap();
    let alt = run_exp2(&alt).unwrap().record;
    outcome(
        pass,
        format!(
            "eps = 0.1 reference on N = 64 (objective {:.3e}, converged {}); N = 2, 4, 8: L2 {} slope {s2:.3}, Linf {} slope {sinf:.3} (required >= 1); {:.1} s. \
             Diagnostic, interior residual nodes: L2 {} slope {:.3}, Linf {} slope {:.3}",
            out.reference.objective,
            out.reference.converged,
            fmt(&l2),
            fmt(&linf),
            el.as_secs_f64(),
            fmt(&alt.column("l2_exact").unwrap()),
            alt.slope("l2_exact").unwrap_or(f64::NAN),
            fmt(&alt.column("linf_exact").unwrap()),
            alt.slope("linf_exact").unwrap_or(f64::NAN),
        ),
    )
}

fn criterion_9() -> Outcome {
    let t = Instant::now();
    let fam = CoefficientFamily::by_name("fo-benchmark-a1zero").unwrap();
    let data = fam.benchmark_data().unwrap().clone();
    let run = |nodes: ResidualNodes| {
        let cfg = TwoScaleConfig {
            omega_n: 16,
            mode: HamiltonianMode::Exact,
            optimizer: OptimizerConfig {
                residual_nodes: nodes,
                ..OptimizerConfig::default()
            },
            ..TwoScaleConfig::default()
        };
        let sol = solve_effective(&cfg, &fam).unwrap();
        let oracle = linear_oracle(sol.u.space(), &data.b, data.f).unwrap();
        (relative_errors(&sol.u, &oracle).unwrap().0, sol.converged)
    };
    let (err, converged) = run(ResidualNodes::All);
    let el = t.elapsed();
    let (alt, _) = run(ResidualNodes::Interior);
    outcome(
        converged && err <= 0.02 && within(el, 60.0),
        format!(
            "N = 16: relative L2 distance to the P1 solution of u - B:D^2u = 1 is {:.3}% (limit 2%); {:.2} s. Diagnostic, interior residual nodes: {:.3}%",
            100.0 * err,
            el.as_secs_f64(),
            100.0 * alt
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "Cordes certificate", criterion_1),
        (2, "Maxwell identity", criterion_2),
        (3, "monotonicity and Lipschitz bounds", criterion_3),
        (4, "manufactured linear convergence", criterion_4),
        (5, "effective Hamiltonian, h-convergence", criterion_5),
        (6, "effective Hamiltonian, sigma-convergence", criterion_6),
        (7, "constant-coefficient exactness", criterion_7),
        (8, "two-scale solve against the eps reference", criterion_8),
        (9, "linear oracle cross-check", criterion_9),
    ];
    let selected: Option<Vec<usize>> = std::env::var("HJBFEM_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|k| k.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (k, name, run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&k)) {
            continue;
        }
        let o = run();
        println!(
            "criterion {k} ({name}): {} | {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed.push(k);
        }
    }
    println!("acceptance: {} failed {failed:?}", failed.len());
    if !failed.is_empty() && std::env::var("HJBFEM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
