//! Convergence sweeps in `h` and `sigma` for the cell problem, the two-scale
//! effective solve against an oscillatory reference, and their outputs
//! (CSV, JSON sidecar, JSON-lines traces).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{Matrix2, Point2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{
    select_lambda, CoefficientFamily, CordesCertificate, SampleGrid, DEFAULT_SAMPLES,
};
use crate::effective::{
    relative_errors, solve_effective, solve_eps_problem, EffectiveSolution, HamiltonianMode,
    InitialGuess, OptimizerConfig, ResidualNodes, TwoScaleConfig,
};
use crate::error::{Error, Result};
use crate::homogenization::{exact_h, solve_cell, CellProblemSpec, EffectiveSample};
use crate::mixed::{DEFAULT_MAX_ITER, DEFAULT_TOL};

/// Successive error ratio above which a `sigma` sweep is considered to have
/// reached the discretisation floor.
pub const FLOOR_RATIO: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    CheckCordes,
    CellSolve,
    Hbar,
    Exp1H,
    Exp1Sigma,
    EffectiveSolve,
    EpsSolve,
    Exp2,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::CheckCordes => "check_cordes",
            Self::CellSolve => "cell_solve",
            Self::Hbar => "hbar",
            Self::Exp1H => "exp1_h",
            Self::Exp1Sigma => "exp1_sigma",
            Self::EffectiveSolve => "effective_solve",
            Self::EpsSolve => "eps_solve",
            Self::Exp2 => "exp2",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            Self::CheckCordes,
            Self::CellSolve,
            Self::Hbar,
            Self::Exp1H,
            Self::Exp1Sigma,
            Self::EffectiveSolve,
            Self::EpsSolve,
            Self::Exp2,
        ];
        let key = s.trim().replace('-', "_");
        all.into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// Hessian argument `R = [[-2, 1], [1, -3]]` of the benchmark sweeps.
pub fn benchmark_r() -> Matrix2<f64> {
    Matrix2::new(-2.0, 1.0, 1.0, -3.0)
}

/// Fully resolved experiment configuration; every field has a default that
/// depends on the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub family: String,
    /// Row-major `[r11, r12, r21, r22]`.
    pub r: [f64; 4],
    pub p: [f64; 2],
    pub s: [f64; 2],
    pub sigma: f64,
    pub sigmas: Vec<f64>,
    /// Cell mesh subdivisions (single solves and the `sigma` sweep).
    pub n: usize,
    pub ns: Vec<usize>,
    /// Cell mesh of the two-scale solve.
    pub cell_n: usize,
    /// Macroscopic mesh of a single effective or `eps` solve.
    pub omega_n: usize,
    pub omega_ns: Vec<usize>,
    pub eps: f64,
    pub reference_n: usize,
    pub modes: Vec<HamiltonianMode>,
    pub tol: f64,
    pub max_iter: usize,
    pub samples: usize,
    pub optimizer_tol: f64,
    pub max_evaluations: usize,
    pub initial: InitialGuess,
    pub residual_nodes: ResidualNodes,
    pub threads: usize,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn defaults(experiment: ExperimentKind) -> Self {
        let opt = OptimizerConfig::default();
        let sigma = match experiment {
            ExperimentKind::Exp2 | ExperimentKind::EffectiveSolve => 0.1,
            _ => 0.01,
        };
        let samples = match experiment {
            ExperimentKind::CheckCordes => 128,
            _ => DEFAULT_SAMPLES,
        };
        Self {
            experiment,
            family: "fo-benchmark".into(),
            r: [-2.0, 1.0, 1.0, -3.0],
            p: [0.0; 2],
            s: [0.0; 2],
            sigma,
            sigmas: (-6..=2).rev().map(|k| 2f64.powi(k)).collect(),
            n: 32,
            ns: vec![4, 8, 16, 32, 64],
            cell_n: 4,
            omega_n: 8,
            omega_ns: vec![2, 4, 8],
            eps: 0.1,
            reference_n: 64,
            modes: match experiment {
                ExperimentKind::Exp2 => vec![HamiltonianMode::Exact, HamiltonianMode::Cell],
                ExperimentKind::EffectiveSolve => vec![HamiltonianMode::Cell],
                _ => vec![HamiltonianMode::Exact],
            },
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            samples,
            optimizer_tol: opt.tol,
            max_evaluations: opt.max_evaluations,
            initial: opt.initial,
            residual_nodes: opt.residual_nodes,
            threads: 0,
            output: None,
        }
    }

    /// Defaults for `experiment`, then the `key = value` lines of `text`
    /// (`#` starts a comment), then `overrides`. An `experiment` key in the
    /// text must agree with `experiment`.
    pub fn resolve<'a>(
        experiment: ExperimentKind,
        text: Option<&str>,
        overrides: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut cfg = Self::defaults(experiment);
        let lines = text
            .into_iter()
            .flat_map(str::lines)
            .map(|l| l.split('#').next().unwrap_or(""));
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) =
                split_pair(line).map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
            cfg.set(k, v)?;
        }
        for item in overrides {
            let (k, v) = split_pair(item)?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("`{key}`: cannot parse `{value}` as {what}"));
        let real = |v: &str| v.trim().parse::<f64>().map_err(|_| bad("a real"));
        let natural = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| bad("a natural number"))
        };
        let reals = |v: &str| v.split(',').map(real).collect::<Result<Vec<_>>>();
        match key {
            "experiment" => {
                let k: ExperimentKind = value.parse()?;
                if k != self.experiment {
                    return Err(Error::Config(format!(
                        "config is for `{}`, not `{}`",
                        k.name(),
                        self.experiment.name()
                    )));
                }
            }
            "family" => self.family = value.trim().to_string(),
            "r" => {
                self.r = reals(value)?
                    .try_into()
                    .map_err(|_| bad("four reals r11,r12,r21,r22"))?;
            }
            "p" => self.p = reals(value)?.try_into().map_err(|_| bad("two reals"))?,
            "s" => self.s = reals(value)?.try_into().map_err(|_| bad("two reals"))?,
            "sigma" => self.sigma = real(value)?,
            "sigmas" => self.sigmas = reals(value)?,
            "n" => self.n = natural(value)?,
            "ns" => self.ns = value.split(',').map(natural).collect::<Result<_>>()?,
            "cell_n" => self.cell_n = natural(value)?,
            "omega_n" => self.omega_n = natural(value)?,
            "omega_ns" => self.omega_ns = value.split(',').map(natural).collect::<Result<_>>()?,
            "eps" => self.eps = real(value)?,
            "reference_n" => self.reference_n = natural(value)?,
            "modes" => {
                self.modes = value
                    .split(',')
                    .map(|m| match m.trim() {
                        "exact" => Ok(HamiltonianMode::Exact),
                        "cell" => Ok(HamiltonianMode::Cell),
                        _ => Err(bad("exact or cell")),
                    })
                    .collect::<Result<_>>()?;
            }
            "tol" => self.tol = real(value)?,
            "max_iter" => self.max_iter = natural(value)?,
            "samples" => self.samples = natural(value)?,
            "optimizer_tol" => self.optimizer_tol = real(value)?,
            "max_evaluations" => self.max_evaluations = natural(value)?,
            "initial" => {
                self.initial = match value.trim() {
                    "zero" => InitialGuess::Zero,
                    "linear" => InitialGuess::Linear,
                    _ => return Err(bad("zero or linear")),
                }
            }
            "residual_nodes" => {
                self.residual_nodes = match value.trim() {
                    "all" => ResidualNodes::All,
                    "interior" => ResidualNodes::Interior,
                    _ => return Err(bad("all or interior")),
                }
            }
            "threads" => self.threads = natural(value)?,
            "output" => self.output = Some(PathBuf::from(value.trim())),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        CoefficientFamily::by_name(&self.family)?;
        if self.sigmas.is_empty()
            || self.ns.is_empty()
            || self.omega_ns.is_empty()
            || self.modes.is_empty()
        {
            return fail("lists must be nonempty");
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.sigma) || !self.sigmas.iter().all(|&s| positive(s)) {
            return fail("sigma values must be positive");
        }
        if !positive(self.eps) || !positive(self.tol) || !positive(self.optimizer_tol) {
            return fail("eps and tolerances must be positive");
        }
        let sizes = [
            self.n,
            self.cell_n,
            self.omega_n,
            self.reference_n,
            self.samples,
            self.max_iter,
        ];
        if sizes.contains(&0)
            || self.ns.contains(&0)
            || self.omega_ns.contains(&0)
            || self.max_evaluations == 0
        {
            return fail("mesh sizes, sample counts and budgets must be positive");
        }
        if self.r[1] != self.r[2] {
            return fail("R must be symmetric");
        }
        Ok(())
    }

    pub fn family(&self) -> Result<CoefficientFamily> {
        CoefficientFamily::by_name(&self.family)
    }

    pub fn r_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.r[0], self.r[1], self.r[2], self.r[3])
    }

    pub fn cell_spec(&self, sigma: f64) -> Result<CellProblemSpec> {
        CellProblemSpec::new(
            Point2::new(self.s[0], self.s[1]),
            Vector2::new(self.p[0], self.p[1]),
            self.r_matrix(),
            sigma,
        )
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            tol: self.optimizer_tol,
            max_evaluations: self.max_evaluations,
            initial: self.initial,
            residual_nodes: self.residual_nodes,
        }
    }

    pub fn two_scale(&self, omega_n: usize, mode: HamiltonianMode) -> TwoScaleConfig {
        TwoScaleConfig {
            omega_n,
            cell_n: self.cell_n,
            sigma: self.sigma,
            mode,
            optimizer: self.optimizer(),
            cell_tol: self.tol,
            cell_max_iter: self.max_iter,
            samples: self.samples,
        }
    }

    pub fn certificate(&self) -> Result<CordesCertificate> {
        select_lambda(&self.family()?, &SampleGrid::new(self.samples))
    }

    /// Output path prefix: the configured one or the experiment name.
    pub fn output_prefix(&self) -> PathBuf {
        self.output
            .clone()
            .unwrap_or_else(|| PathBuf::from(self.experiment.name()))
    }
}

fn split_pair(item: &str) -> Result<(&str, &str)> {
    item.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("expected key = value, got `{item}`")))
}

/// Least-squares slope of `log value` against `log parameter`.
pub fn estimate_rate(rows: &[(f64, f64)]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "rate needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    if let Some(&(p, v)) = rows.iter().find(|(p, v)| !(*p > 0.0 && *v > 0.0)) {
        return Err(Error::NonPositive(if p > 0.0 { v } else { p }));
    }
    let n = rows.len() as f64;
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows.iter().map(|(p, v)| (p.ln(), v.ln())).unzip();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument(
            "rate needs distinct parameters".into(),
        ));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Fitted log-log slope of one metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Slope {
    pub metric: String,
    /// `None` when fewer than two usable rows exist.
    pub value: Option<f64>,
    pub rows_used: usize,
}

/// Table of a sweep: one row per parameter value, in configuration order.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRecord {
    pub experiment: String,
    /// Column the slopes are regressed against.
    pub parameter: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Wall-clock seconds per row (kept out of the CSV so reruns are
    /// byte-identical).
    pub seconds: Vec<f64>,
    pub slopes: Vec<Slope>,
    pub diagnostics: serde_json::Value,
    pub failures: Vec<String>,
}

impl ConvergenceRecord {
    fn new(experiment: &str, parameter: &str, columns: &[&str]) -> Self {
        Self {
            experiment: experiment.into(),
            parameter: parameter.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            seconds: Vec::new(),
            slopes: Vec::new(),
            diagnostics: serde_json::Value::Null,
            failures: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn slope(&self, metric: &str) -> Option<f64> {
        self.slopes
            .iter()
            .find(|s| s.metric == metric)
            .and_then(|s| s.value)
    }

    /// Fits `metric` against the parameter column over `range` of rows.
    fn fit(&mut self, metric: &str, range: std::ops::Range<usize>) {
        let p = self.column(&self.parameter).unwrap_or_default();
        let v = self.column(metric).unwrap_or_default();
        let rows: Vec<(f64, f64)> = p
            .into_iter()
            .zip(v)
            .skip(range.start)
            .take(range.len())
            .collect();
        let value = estimate_rate(&rows).ok();
        if value.is_none() {
            self.failures.push(format!(
                "{}: no slope for {metric} ({} usable rows)",
                self.experiment,
                rows.len()
            ));
        }
        self.slopes.push(Slope {
            metric: metric.into(),
            value,
            rows_used: rows.len(),
        });
    }

    /// Header comment lines, column header and data rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# experiment: {}", self.experiment);
        let _ = writeln!(out, "# slope = d log(metric) / d log({})", self.parameter);
        for s in &self.slopes {
            match s.value {
                Some(v) => writeln!(
                    out,
                    "# slope {}: {v:.6} over {} rows",
                    s.metric, s.rows_used
                ),
                None => writeln!(out, "# slope {}: none", s.metric),
            }
            .expect("write to string");
        }
        let _ = writeln!(out, "{}", self.columns.join(","));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn converged(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Column names and units of every CSV produced by the sweeps.
pub const CSV_COLUMNS: &str = "\
exp1_h:     n (cells per side), h (sqrt2/n), h_sigma_h (approximate H), rel_error (|H_h - H|/|H|), \
eta, sqrt_eta, iterations (Howard steps)
exp1_sigma: sigma, h_sigma_h, rel_error, eta, sqrt_eta, iterations
exp2:       n (Omega cells per side), h (sqrt2/n), then per mode l2_<mode>, linf_<mode> \
(relative to the eps reference), objective_<mode>, evaluations_<mode>
All slopes are least-squares fits of log(metric) against log(parameter).";

fn cell_row(sample: &EffectiveSample, exact: f64) -> [f64; 5] {
    [
        sample.value,
        ((sample.value - exact) / exact).abs(),
        sample.estimator.eta,
        sample.estimator.sqrt_eta,
        sample.state.iterations as f64,
    ]
}

/// Runs `f` on every item in parallel and returns the results in order
/// together with their wall-clock seconds.
fn timed_parallel<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<(R, f64)> {
    items
        .par_iter()
        .map(|item| {
            let t = Instant::now();
            let r = f(item);
            (r, t.elapsed().as_secs_f64())
        })
        .collect()
}

/// Relative error of `H_{sigma,h}` at fixed `sigma` for each cell mesh in
/// `ns`; slopes against `h`.
pub fn run_exp1_h(cfg: &ExperimentConfig) -> Result<(ConvergenceRecord, CordesCertificate)> {
    let family = cfg.family()?;
    let cert = cfg.certificate()?;
    let spec = cfg.cell_spec(cfg.sigma)?;
    let exact = exact_h(&family, &spec.r)?;
    let mut rec = ConvergenceRecord::new(
        "exp1_h",
        "h",
        &[
            "n",
            "h",
            "h_sigma_h",
            "rel_error",
            "eta",
            "sqrt_eta",
            "iterations",
        ],
    );
    let results = timed_parallel(&cfg.ns, |&n| {
        solve_cell(&family, &cert, &spec, n, cfg.tol, cfg.max_iter)
    });
    for (&n, (res, secs)) in cfg.ns.iter().zip(results) {
        match res {
            Ok(sample) => {
                let mut row = vec![n as f64, 2f64.sqrt() / n as f64];
                row.extend(cell_row(&sample, exact));
                rec.rows.push(row);
                rec.seconds.push(secs);
            }
            Err(e @ Error::NoConvergence { .. }) => {
                rec.failures.push(format!("exp1_h: n = {n}: {e}"))
            }
            Err(e) => return Err(e),
        }
    }
    let all = 0..rec.rows.len();
    for metric in ["rel_error", "eta", "sqrt_eta"] {
        rec.fit(metric, all.clone());
    }
    rec.diagnostics = serde_json::json!({ "exact_h": exact, "sigma": cfg.sigma });
    Ok((rec, cert))
}

/// Number of leading rows before the successive error ratio first exceeds
/// [`FLOOR_RATIO`].
pub fn pre_floor_rows(errors: &[f64]) -> usize {
    errors
        .windows(2)
        .position(|w| w[1] / w[0] > FLOOR_RATIO)
        .map_or(errors.len(), |i| i + 1)
}

/// Relative error of `H_{sigma,h}` at a fixed cell mesh for each `sigma`;
/// the slope against `sigma` is fitted on the pre-floor rows.
pub fn run_exp1_sigma(cfg: &ExperimentConfig) -> Result<(ConvergenceRecord, CordesCertificate)> {
    let family = cfg.family()?;
    let cert = cfg.certificate()?;
    let exact = exact_h(&family, &cfg.r_matrix())?;
    let mut rec = ConvergenceRecord::new(
        "exp1_sigma",
        "sigma",
        &[
            "sigma",
            "h_sigma_h",
            "rel_error",
            "eta",
            "sqrt_eta",
            "iterations",
        ],
    );
    let results = timed_parallel(&cfg.sigmas, |&sigma| {
        solve_cell(
            &family,
            &cert,
            &cfg.cell_spec(sigma)?,
            cfg.n,
            cfg.tol,
            cfg.max_iter,
        )
    });
    for (&sigma, (res, secs)) in cfg.sigmas.iter().zip(results) {
        match res {
            Ok(sample) => {
                let mut row = vec![sigma];
                row.extend(cell_row(&sample, exact));
                rec.rows.push(row);
                rec.seconds.push(secs);
            }
            Err(e @ Error::NoConvergence { .. }) => rec
                .failures
                .push(format!("exp1_sigma: sigma = {sigma}: {e}")),
            Err(e) => return Err(e),
        }
    }
    let errors = rec.column("rel_error").unwrap_or_default();
    let pre = pre_floor_rows(&errors);
    rec.fit("rel_error", 0..pre);

    // the last row approximates the floor; its removal is a diagnostic only
    let sigmas = rec.column("sigma").unwrap_or_default();
    let floor = errors.last().copied().unwrap_or(0.0);
    let shifted: Vec<(f64, f64)> = sigmas
        .iter()
        .zip(&errors)
        .take(errors.len().saturating_sub(1))
        .map(|(&s, &e)| (s, e - floor))
        .take_while(|(_, e)| *e > 0.0)
        .collect();
    rec.diagnostics = serde_json::json!({
        "exact_h": exact,
        "n": cfg.n,
        "pre_floor_rows": pre,
        "floor_estimate": floor,
        "floor_subtracted_slope": estimate_rate(&shifted).ok(),
    });
    Ok((rec, cert))
}

/// Outcome of one macroscopic solve inside the second experiment.
#[derive(Debug, Clone)]
pub struct Exp2Solve {
    pub n: usize,
    pub mode: HamiltonianMode,
    pub solution: EffectiveSolution,
    pub l2: f64,
    pub linf: f64,
}

/// Full output of the second experiment.
#[derive(Debug, Clone)]
pub struct Exp2Output {
    pub record: ConvergenceRecord,
    pub certificate: CordesCertificate,
    pub reference: EffectiveSolution,
    pub solves: Vec<Exp2Solve>,
}

pub fn mode_name(mode: HamiltonianMode) -> &'static str {
    match mode {
        HamiltonianMode::Exact => "exact",
        HamiltonianMode::Cell => "cell",
    }
}

/// Effective solves on each `omega_ns` mesh and each mode, compared with the
/// `eps` reference on `reference_n`; slopes against `h_Omega`.
pub fn run_exp2(cfg: &ExperimentConfig) -> Result<Exp2Output> {
    let family = cfg.family()?;
    let cert = cfg.certificate()?;
    let reference = solve_eps_problem(cfg.eps, cfg.reference_n, &family, &cfg.optimizer())?;
    let mut failures = Vec::new();
    if !reference.converged {
        failures.push(format!(
            "exp2: reference eps solve on n = {} did not converge",
            cfg.reference_n
        ));
    }

    let mut columns = vec!["n".to_string(), "h".to_string()];
    for &m in &cfg.modes {
        for c in ["l2", "linf", "objective", "evaluations"] {
            columns.push(format!("{c}_{}", mode_name(m)));
        }
    }
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut rec = ConvergenceRecord::new("exp2", "h", &cols);
    rec.failures = failures;

    let mut solves = Vec::new();
    for &n in &cfg.omega_ns {
        let t = Instant::now();
        let mut row = vec![n as f64, 2f64.sqrt() / n as f64];
        for &mode in &cfg.modes {
            let solution = solve_effective(&cfg.two_scale(n, mode), &family)?;
            if !solution.converged {
                rec.failures.push(format!(
                    "exp2: {} solve on n = {n} did not converge",
                    mode_name(mode)
                ));
            }
            let (l2, linf) = relative_errors(&solution.u, &reference.u)?;
            row.extend([l2, linf, solution.objective, solution.evaluations as f64]);
            solves.push(Exp2Solve {
                n,
                mode,
                solution,
                l2,
                linf,
            });
        }
        rec.rows.push(row);
        rec.seconds.push(t.elapsed().as_secs_f64());
    }
    let all = 0..rec.rows.len();
    for &m in &cfg.modes {
        rec.fit(&format!("l2_{}", mode_name(m)), all.clone());
        rec.fit(&format!("linf_{}", mode_name(m)), all.clone());
    }
    rec.diagnostics = serde_json::json!({
        "reference": {
            "eps": cfg.eps,
            "n": cfg.reference_n,
            "objective": reference.objective,
            "iterations": reference.iterations,
            "evaluations": reference.evaluations,
            "converged": reference.converged,
        }
    });
    Ok(Exp2Output {
        record: rec,
        certificate: cert,
        reference,
        solves,
    })
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(contents)?;
    Ok(())
}

/// `prefix` with `suffix` appended to its file name.
pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// JSON sidecar: resolved configuration, certificate and run summary.
pub fn sidecar(
    cfg: &ExperimentConfig,
    certificate: Option<&CordesCertificate>,
    summary: serde_json::Value,
) -> serde_json::Value {
    serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "certificate": certificate,
        "summary": summary,
    })
}

/// Writes `<prefix>.csv` and `<prefix>.json` for a record.
pub fn write_record(
    cfg: &ExperimentConfig,
    rec: &ConvergenceRecord,
    cert: &CordesCertificate,
) -> Result<()> {
    let prefix = cfg.output_prefix();
    write_file(&with_suffix(&prefix, ".csv"), rec.to_csv().as_bytes())?;
    let summary = serde_json::to_value(rec)?;
    let json = serde_json::to_vec_pretty(&sidecar(cfg, Some(cert), summary))?;
    write_file(&with_suffix(&prefix, ".json"), &json)
}

/// One JSON object per line.
pub fn json_lines<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rate_examples() {
        let rows: Vec<(f64, f64)> = (1..6)
            .map(|k| (k as f64, 3.0 * (k as f64).powi(2)))
            .collect();
        assert!((estimate_rate(&rows).unwrap() - 2.0).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = (1..6).map(|k| (k as f64, 0.7)).collect();
        assert!(estimate_rate(&flat).unwrap().abs() < 1e-12);
        assert!((estimate_rate(&[(1.0, 8.0), (2.0, 1.0)]).unwrap() + 3.0).abs() < 1e-12);
        assert!(matches!(
            estimate_rate(&[(1.0, 1.0), (2.0, 0.0)]),
            Err(Error::NonPositive(_))
        ));
        assert!(estimate_rate(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn floor_detection() {
        assert_eq!(pre_floor_rows(&[8.0, 4.0, 2.0, 1.9, 1.9]), 3);
        assert_eq!(pre_floor_rows(&[8.0, 4.0, 2.0]), 3);
        assert_eq!(pre_floor_rows(&[1.0, 1.0]), 1);
        assert_eq!(pre_floor_rows(&[]), 0);
    }

    #[test]
    fn config_parsing() {
        let text =
            "# sweep\nexperiment = exp1-h\nns = 4, 8\nsigma = 0.5  # override\n\nr = 1,0,0,1\n";
        let cfg = ExperimentConfig::resolve(
            ExperimentKind::Exp1H,
            Some(text),
            ["tol=1e-9", "modes=exact,cell"],
        )
        .unwrap();
        assert_eq!(cfg.ns, vec![4, 8]);
        assert_eq!(cfg.sigma, 0.5);
        assert_eq!(cfg.tol, 1e-9);
        assert_eq!(cfg.r_matrix(), Matrix2::identity());
        assert_eq!(
            cfg.modes,
            vec![HamiltonianMode::Exact, HamiltonianMode::Cell]
        );

        let defaults = ExperimentConfig::defaults(ExperimentKind::Exp1Sigma);
        assert_eq!(defaults.sigmas.len(), 9);
        assert_eq!(defaults.sigmas[0], 4.0);
        assert_eq!(*defaults.sigmas.last().unwrap(), 1.0 / 64.0);

        for bad in [
            "ns = ",
            "nope = 1",
            "family = unknown",
            "r = 1,2,3,4",
            "experiment = exp2",
            "sigma = -1",
            "x",
        ] {
            assert!(
                ExperimentConfig::resolve(ExperimentKind::Exp1H, Some(bad), []).is_err(),
                "{bad}"
            );
        }
    }

    #[test]
    fn sidecar_round_trips_the_config() {
        let cfg = ExperimentConfig::defaults(ExperimentKind::Exp2);
        let v = sidecar(&cfg, None, serde_json::Value::Null);
        let back: ExperimentConfig = serde_json::from_value(v["config"].clone()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn single_row_sweep_has_no_slope() {
        let cfg =
            ExperimentConfig::resolve(ExperimentKind::Exp1H, None, ["ns=4", "sigma=0.1"]).unwrap();
        let (rec, _) = run_exp1_h(&cfg).unwrap();
        assert_eq!(rec.rows.len(), 1);
        assert_eq!(rec.slope("rel_error"), None);
        assert!(!rec.converged());
    }

    #[test]
    fn sweep_csv_is_reproducible() {
        let cfg = ExperimentConfig::resolve(ExperimentKind::Exp1H, None, ["ns=4,8", "sigma=0.1"])
            .unwrap();
        let a = run_exp1_h(&cfg).unwrap().0.to_csv();
        let b = run_exp1_h(&cfg).unwrap().0.to_csv();
        assert_eq!(a, b);
        assert!(a.contains("n,h,h_sigma_h,rel_error,eta,sqrt_eta,iterations"));
    }

    #[test]
    fn large_sigma_is_finite() {
        let cfg = ExperimentConfig::resolve(ExperimentKind::Exp1Sigma, None, ["sigmas=16", "n=8"])
            .unwrap();
        let (rec, _) = run_exp1_sigma(&cfg).unwrap();
        assert!(rec.rows[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sigma_floor_drops_with_refinement() {
        let floor = |n: usize| {
            let cfg = ExperimentConfig::resolve(
                ExperimentKind::Exp1Sigma,
                None,
                [format!("n={n}").as_str(), "sigmas=0.001"],
            )
            .unwrap();
            run_exp1_sigma(&cfg).unwrap().0.rows[0][2]
        };
        assert!(floor(16) < floor(8));
    }

    proptest! {
        #[test]
        fn rate_of_power_law(k in -4.0f64..4.0, c in 0.01f64..100.0) {
            let rows: Vec<(f64, f64)> = (0..5).map(|i| {
                let p = 2f64.powi(-i);
                (p, c * p.powf(k))
            }).collect();
            prop_assert!((estimate_rate(&rows).unwrap() - k).abs() < 1e-9);
        }
    }
}
