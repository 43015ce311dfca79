//! Control-indexed coefficient families, Cordes certification, the
//! renormalisation weight `gamma` and the pointwise Bellman maximum.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix2, Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients `(A, b, c, f)` of one linear operator at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub c: f64,
    pub f: f64,
}

impl Coefficients {
    /// `|A|^2 + |b|^2/(2 lambda) + c^2/lambda^2`
    fn cordes_lhs(&self, lambda: f64) -> f64 {
        self.a.norm_squared() + self.b.norm_squared() / (2.0 * lambda) + (self.c / lambda).powi(2)
    }

    /// `tr A + c/lambda`
    fn cordes_trace(&self, lambda: f64) -> f64 {
        self.a.trace() + self.c / lambda
    }

    /// Multiplies every coefficient by `gamma`.
    pub fn scaled(&self, gamma: f64) -> ScaledCoefficients {
        ScaledCoefficients {
            a: self.a * gamma,
            b: self.b * gamma,
            c: self.c * gamma,
            f: self.f * gamma,
        }
    }
}

/// `gamma`-scaled coefficients; `residual` is the scaled operator applied to
/// `(Dw, grad u, u)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledCoefficients {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub c: f64,
    pub f: f64,
}

impl ScaledCoefficients {
    /// `gamma (-A:M - b.q + c v - f)`
    #[inline]
    pub fn residual(&self, m: &Matrix2<f64>, q: &Vector2<f64>, v: f64) -> f64 {
        -self.a.component_mul(m).sum() - self.b.dot(q) + self.c * v - self.f
    }
}

/// Finite set of control values, sorted and free of duplicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid(Vec<f64>);

impl ControlGrid {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("control grid is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "control values must be finite".into(),
            ));
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(Self(values))
    }

    pub fn singleton(alpha: f64) -> Self {
        Self(vec![alpha])
    }

    /// `n` equispaced points in `[0, 1]` (`n >= 2`).
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "uniform grid needs >= 2 points, got {n}"
            )));
        }
        Self::new((0..n).map(|k| k as f64 / (n - 1) as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Points per axis of the default Cordes sample grid.
pub const DEFAULT_SAMPLES: usize = 64;
/// Control grid size for families not flagged affine in the control.
pub const DEFAULT_CONTROL_POINTS: usize = 33;

type CoefficientFn = dyn Fn(&Point2<f64>, &Point2<f64>, f64) -> Coefficients + Send + Sync;
type ScalarField = dyn Fn(&Point2<f64>) -> f64 + Send + Sync;

/// Data of the benchmark `A = (a0 + alpha a1) B`, `b = 0`, `c = 1`, `f`
/// constant, for which the effective Hamiltonian has a closed form.
#[derive(Clone)]
pub struct BenchmarkData {
    pub b: Matrix2<f64>,
    pub a0: Arc<ScalarField>,
    pub a1: Arc<ScalarField>,
    pub f: f64,
}

/// A family `alpha -> (A, b, c, f)(x, y)`, periodic in `y`.
#[derive(Clone)]
pub struct CoefficientFamily {
    name: String,
    eval: Arc<CoefficientFn>,
    controls: ControlGrid,
    x_dependent: bool,
    drift_free: bool,
    benchmark: Option<BenchmarkData>,
}

impl fmt::Debug for CoefficientFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientFamily")
            .field("name", &self.name)
            .field("controls", &self.controls)
            .field("x_dependent", &self.x_dependent)
            .field("drift_free", &self.drift_free)
            .finish_non_exhaustive()
    }
}

/// Names accepted by [`CoefficientFamily::by_name`].
pub const REGISTRY: [&str; 4] = [
    "fo-benchmark",
    "fo-benchmark-a1zero",
    "manufactured",
    "laplace",
];

impl CoefficientFamily {
    pub fn new(
        name: impl Into<String>,
        controls: ControlGrid,
        eval: impl Fn(&Point2<f64>, &Point2<f64>, f64) -> Coefficients + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            eval: Arc::new(eval),
            controls,
            x_dependent: false,
            drift_free: false,
            benchmark: None,
        }
    }

    pub fn with_x_dependence(mut self, x_dependent: bool) -> Self {
        self.x_dependent = x_dependent;
        self
    }

    /// Declares `b = 0` for every argument; effective solvers then skip the
    /// gradient argument.
    pub fn with_drift_free(mut self, drift_free: bool) -> Self {
        self.drift_free = drift_free;
        self
    }

    pub fn with_controls(mut self, controls: ControlGrid) -> Self {
        self.controls = controls;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Benchmark family `A = (a0 + alpha a1) B`, `b = 0`, `c = 1`, on
    /// `Lambda = [0, 1]`; affine in `alpha`, so the endpoints suffice.
    pub fn benchmark(
        name: impl Into<String>,
        b: Matrix2<f64>,
        a0: impl Fn(&Point2<f64>) -> f64 + Send + Sync + 'static,
        a1: impl Fn(&Point2<f64>) -> f64 + Send + Sync + 'static,
        f: f64,
    ) -> Self {
        let data = BenchmarkData {
            b,
            a0: Arc::new(a0),
            a1: Arc::new(a1),
            f,
        };
        let d = data.clone();
        let controls = ControlGrid(vec![0.0, 1.0]);
        let mut family = Self::new(name, controls, move |_x, y, alpha| Coefficients {
            a: d.b * ((d.a0)(y) + alpha * (d.a1)(y)),
            b: Vector2::zeros(),
            c: 1.0,
            f: d.f,
        })
        .with_drift_free(true);
        family.benchmark = Some(data);
        family
    }

    /// Looks up a built-in family.
    pub fn by_name(name: &str) -> Result<Self> {
        let b = Matrix2::new(2.0, -1.0, -1.0, 4.0);
        match name {
            "fo-benchmark" => Ok(Self::benchmark(
                name,
                b,
                |_| 1.0,
                |y| (2.0 * PI * y.x).sin().powi(2) * (2.0 * PI * y.y).cos().powi(2) + 1.0,
                1.0,
            )),
            "fo-benchmark-a1zero" => Ok(Self::benchmark(name, b, |_| 1.0, |_| 0.0, 1.0)),
            "manufactured" => {
                Ok(
                    Self::new(name, ControlGrid::singleton(0.0), |_x, y, _| Coefficients {
                        a: Matrix2::identity(),
                        b: Vector2::zeros(),
                        c: 1.0,
                        f: (8.0 * PI * PI + 1.0) * (2.0 * PI * y.x).cos() * (2.0 * PI * y.y).cos(),
                    })
                    .with_drift_free(true),
                )
            }
            "laplace" => Ok(
                Self::new(name, ControlGrid::singleton(0.0), |_, _, _| Coefficients {
                    a: Matrix2::identity(),
                    b: Vector2::zeros(),
                    c: 1.0,
                    f: 0.0,
                })
                .with_drift_free(true),
            ),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn controls(&self) -> &ControlGrid {
        &self.controls
    }

    pub fn x_dependent(&self) -> bool {
        self.x_dependent
    }

    pub fn drift_free(&self) -> bool {
        self.drift_free
    }

    pub fn benchmark_data(&self) -> Option<&BenchmarkData> {
        self.benchmark.as_ref()
    }

    #[inline]
    pub fn eval(&self, x: &Point2<f64>, y: &Point2<f64>, alpha: f64) -> Coefficients {
        (self.eval)(x, y, alpha)
    }
}

/// Sample points for Cordes verification: an `n x n` grid of `y` in the
/// periodic cell, at each macroscopic point in `xs`, times all controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    pub n: usize,
    pub xs: Vec<[f64; 2]>,
}

impl Default for SampleGrid {
    fn default() -> Self {
        Self::new(DEFAULT_SAMPLES)
    }
}

impl SampleGrid {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            xs: vec![[0.5, 0.5]],
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "{}x{} cell grid at {} macroscopic point(s)",
            self.n,
            self.n,
            self.xs.len()
        )
    }

    fn samples(&self, family: &CoefficientFamily) -> Result<Vec<(Point2<f64>, f64, Coefficients)>> {
        if self.n == 0 || self.xs.is_empty() {
            return Err(Error::EmptyGrid);
        }
        let mut out = Vec::with_capacity(self.n * self.n * family.controls.len() * self.xs.len());
        for x in &self.xs {
            let x = Point2::new(x[0], x[1]);
            for j in 0..self.n {
                for i in 0..self.n {
                    let y = Point2::new(i as f64 / self.n as f64, j as f64 / self.n as f64);
                    for &alpha in family.controls.values() {
                        out.push((y, alpha, family.eval(&x, &y, alpha)));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Cordes parameters certified on a sample grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CordesCertificate {
    pub lambda: f64,
    pub delta: f64,
    /// Smallest sampled value of `RHS - LHS`; nonnegative.
    pub margin: f64,
    pub sample_description: String,
    /// Sampled ellipticity bounds `zeta1 |xi|^2 <= A xi.xi <= zeta2 |xi|^2`.
    pub zeta1: f64,
    pub zeta2: f64,
}

impl CordesCertificate {
    /// Certificate with explicitly given parameters (no sampling).
    pub fn given(lambda: f64, delta: f64) -> Result<Self> {
        if lambda <= 0.0 || !(0.0 < delta && delta < 1.0) {
            return Err(Error::CordesFailure(format!(
                "lambda = {lambda}, delta = {delta} outside lambda > 0, 0 < delta < 1"
            )));
        }
        Ok(Self {
            lambda,
            delta,
            margin: f64::NAN,
            sample_description: "given".into(),
            zeta1: f64::NAN,
            zeta2: f64::NAN,
        })
    }

    /// Same `delta`, `lambda` scaled by `sigma`.
    pub fn rescaled(&self, sigma: f64) -> Self {
        Self {
            lambda: self.lambda * sigma,
            ..self.clone()
        }
    }

    /// `sqrt(1 - delta)`
    pub fn contraction(&self) -> f64 {
        (1.0 - self.delta).sqrt()
    }
}

/// Minimum over samples of `(tr A + c/lambda)^2/(2 + delta) - LHS`.
pub fn cordes_slack(
    family: &CoefficientFamily,
    lambda: f64,
    delta: f64,
    grid: &SampleGrid,
) -> Result<f64> {
    if lambda <= 0.0 || !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!(
            "lambda = {lambda}, delta = {delta}"
        )));
    }
    Ok(grid
        .samples(family)?
        .iter()
        .map(|(_, _, k)| k.cordes_trace(lambda).powi(2) / (2.0 + delta) - k.cordes_lhs(lambda))
        .fold(f64::INFINITY, f64::min))
}

/// Largest `delta` with nonnegative slack at `lambda`: `min S^2/L - 2`.
fn delta_at(samples: &[(Point2<f64>, f64, Coefficients)], lambda: f64) -> f64 {
    samples
        .iter()
        .map(|(_, _, k)| k.cordes_trace(lambda).powi(2) / k.cordes_lhs(lambda) - 2.0)
        .fold(f64::INFINITY, f64::min)
}

const DELTA_CAP: f64 = 1.0 - 1e-6;
const DELTA_FLOOR: f64 = 1e-6;

/// Grid search over `lambda` in `[1e-3, 1e3]` (log-spaced, then refined)
/// for the largest certifiable `delta`; ties go to the smallest `lambda`.
pub fn select_lambda(family: &CoefficientFamily, grid: &SampleGrid) -> Result<CordesCertificate> {
    let samples = grid.samples(family)?;
    let mut zeta1 = f64::INFINITY;
    let mut zeta2 = f64::NEG_INFINITY;
    for (y, alpha, k) in &samples {
        let eig = k.a.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        let asym = (k.a - k.a.transpose()).norm();
        if !(lo > 0.0) || asym > 1e-12 * k.a.norm() || !(k.c > 0.0) {
            return Err(Error::CordesFailure(format!(
                "ellipticity fails at y = ({}, {}), alpha = {alpha}: eigenvalues ({lo}, {hi}), c = {}",
                y.x, y.y, k.c
            )));
        }
        zeta1 = zeta1.min(lo);
        zeta2 = zeta2.max(hi);
    }

    let score = |lambda: f64| delta_at(&samples, lambda).min(DELTA_CAP);
    let coarse = 121;
    let lambdas: Vec<f64> = (0..coarse)
        .map(|k| 10f64.powf(-3.0 + 6.0 * k as f64 / (coarse - 1) as f64))
        .collect();
    let mut best = (lambdas[0], score(lambdas[0]));
    let mut best_k = 0;
    for (k, &l) in lambdas.iter().enumerate().skip(1) {
        let d = score(l);
        if d > best.1 {
            best = (l, d);
            best_k = k;
        }
    }
    // refine in log space between the neighbours of the coarse optimum
    let lo = lambdas[best_k.saturating_sub(1)].ln();
    let hi = lambdas[(best_k + 1).min(coarse - 1)].ln();
    let fine = 200;
    for k in 0..=fine {
        let l = (lo + (hi - lo) * k as f64 / fine as f64).exp();
        let d = score(l);
        if d > best.1 || (d == best.1 && l < best.0) {
            best = (l, d);
        }
    }

    let (lambda, dmax) = best;
    if !(dmax >= DELTA_FLOOR) {
        return Err(Error::CordesFailure(format!(
            "best delta {dmax:e} at lambda = {lambda} is below {DELTA_FLOOR:e}"
        )));
    }
    let mut delta = (dmax - 1e-10).min(DELTA_CAP);
    let mut margin = cordes_slack(family, lambda, delta, grid)?;
    while margin < 0.0 {
        delta -= 1e-9;
        margin = cordes_slack(family, lambda, delta, grid)?;
    }
    Ok(CordesCertificate {
        lambda,
        delta,
        margin,
        sample_description: grid.describe(),
        zeta1,
        zeta2,
    })
}

/// Renormalisation weight `(tr A + c/lambda) / (|A|^2 + |b|^2/(2 lambda) + c^2/lambda^2)`.
pub fn gamma_of(k: &Coefficients, lambda: f64) -> Option<f64> {
    let num = k.cordes_trace(lambda);
    let den = k.cordes_lhs(lambda);
    (den > 0.0 && num > 0.0).then(|| num / den)
}

pub fn gamma_at(
    family: &CoefficientFamily,
    certificate: &CordesCertificate,
    x: &Point2<f64>,
    y: &Point2<f64>,
    alpha: f64,
) -> Result<f64> {
    gamma_of(&family.eval(x, y, alpha), certificate.lambda).ok_or(Error::DegenerateCoefficients {
        y0: y.x,
        y1: y.y,
        alpha,
    })
}

/// `gamma`-scaled coefficients for every control at one point.
pub fn scaled_coefficients(
    family: &CoefficientFamily,
    certificate: &CordesCertificate,
    x: &Point2<f64>,
    y: &Point2<f64>,
) -> Result<Vec<ScaledCoefficients>> {
    family
        .controls
        .values()
        .iter()
        .map(|&alpha| {
            let k = family.eval(x, y, alpha);
            let g = gamma_of(&k, certificate.lambda).ok_or(Error::DegenerateCoefficients {
                y0: y.x,
                y1: y.y,
                alpha,
            })?;
            Ok(k.scaled(g))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BellmanValue {
    pub value: f64,
    /// Index into the control grid.
    pub index: usize,
    pub argmax: f64,
}

/// Maximum of precomputed scaled residuals; ties go to the first
/// (smallest) control.
#[inline]
pub fn bellman_max_scaled(
    scaled: &[ScaledCoefficients],
    m: &Matrix2<f64>,
    q: &Vector2<f64>,
    v: f64,
) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, s) in scaled.iter().enumerate() {
        let r = s.residual(m, q, v);
        if r > best.0 {
            best = (r, i);
        }
    }
    best
}

/// `sup_alpha gamma (-A:M - b.q + c v - f)` over the control grid.
pub fn bellman_max(
    family: &CoefficientFamily,
    certificate: &CordesCertificate,
    x: &Point2<f64>,
    y: &Point2<f64>,
    m: &Matrix2<f64>,
    q: &Vector2<f64>,
    v: f64,
) -> BellmanValue {
    let mut best = BellmanValue {
        value: f64::NEG_INFINITY,
        index: 0,
        argmax: family.controls.values()[0],
    };
    for (i, &alpha) in family.controls.values().iter().enumerate() {
        let k = family.eval(x, y, alpha);
        let g = gamma_of(&k, certificate.lambda).unwrap_or(f64::NAN);
        let r = k.scaled(g).residual(m, q, v);
        if r > best.value {
            best = BellmanValue {
                value: r,
                index: i,
                argmax: alpha,
            };
        }
    }
    best
}

/// `L_lambda(w, u) = -div w + lambda u`
#[inline]
pub fn l_lambda(div_w: f64, u: f64, lambda: f64) -> f64 {
    -div_w + lambda * u
}
