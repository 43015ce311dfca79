//! Approximate-corrector cell problems and the approximated effective
//! Hamiltonian `H_{sigma,h}(s, p, R) = -sigma int_Y v_h`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{Matrix2, Point2, Vector2};
use serde::Serialize;

use crate::control::{CoefficientFamily, Coefficients, CordesCertificate};
use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimatorReport};
use crate::mixed::{MixedConfig, MixedProblem, MixedState};
use crate::quadrature::gauss_legendre;
use crate::sparse::dot;

/// Arguments `(s, p, R)` and regularisation `sigma` of one cell problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellProblemSpec {
    pub s: Point2<f64>,
    pub p: Vector2<f64>,
    pub r: Matrix2<f64>,
    pub sigma: f64,
}

impl CellProblemSpec {
    pub fn new(s: Point2<f64>, p: Vector2<f64>, r: Matrix2<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma = {sigma} must be positive"
            )));
        }
        if (r - r.transpose()).norm() > 1e-12 * (1.0 + r.norm()) {
            return Err(Error::InvalidArgument("R must be symmetric".into()));
        }
        Ok(Self { s, p, r, sigma })
    }

    /// Cell problem at `s = 0`, `p = 0`.
    pub fn hessian(r: Matrix2<f64>, sigma: f64) -> Result<Self> {
        Self::new(Point2::origin(), Vector2::zeros(), r, sigma)
    }

    fn key(&self) -> [i64; 9] {
        let q = |v: f64| (v * 1e12).round() as i64;
        [
            q(self.s.x),
            q(self.s.y),
            q(self.p.x),
            q(self.p.y),
            q(self.r[(0, 0)]),
            q(self.r[(0, 1)]),
            q(self.r[(1, 0)]),
            q(self.r[(1, 1)]),
            q(self.sigma),
        ]
    }
}

/// Family of the cell problem: diffusion `A(s, ., alpha)`, no drift,
/// zeroth-order coefficient `sigma`, source `A:R + b.p + f`, with
/// certificate `(sigma lambda, delta)`.
pub fn freeze_cell_family(
    base: &CoefficientFamily,
    certificate: &CordesCertificate,
    spec: &CellProblemSpec,
) -> (CoefficientFamily, CordesCertificate) {
    let b = base.clone();
    let spec = *spec;
    let family = CoefficientFamily::new(
        format!("{}@cell", base.name()),
        base.controls().clone(),
        move |_x, y, alpha| {
            let k = b.eval(&spec.s, y, alpha);
            Coefficients {
                a: k.a,
                b: Vector2::zeros(),
                c: spec.sigma,
                f: k.a.component_mul(&spec.r).sum() + k.b.dot(&spec.p) + k.f,
            }
        },
    )
    .with_drift_free(true);
    (family, certificate.rescaled(spec.sigma))
}

/// Solved cell problem.
#[derive(Debug, Clone)]
pub struct EffectiveSample {
    pub value: f64,
    pub state: MixedState,
    pub estimator: EstimatorReport,
    pub spec: CellProblemSpec,
    pub mesh_n: usize,
    pub certificate: CordesCertificate,
}

/// `-sigma int_Y u_h`, integrating the finite element function exactly.
pub fn hamiltonian_value(state: &MixedState, sigma: f64) -> f64 {
    -sigma * dot(&state.u.space().basis_integrals(), state.u.coeffs())
}

pub fn solve_cell(
    base: &CoefficientFamily,
    certificate: &CordesCertificate,
    spec: &CellProblemSpec,
    n: usize,
    tol: f64,
    max_iter: usize,
) -> Result<EffectiveSample> {
    solve_cell_with(
        base,
        certificate,
        spec,
        n,
        tol,
        max_iter,
        MixedConfig::default(),
    )
}

pub fn solve_cell_with(
    base: &CoefficientFamily,
    certificate: &CordesCertificate,
    spec: &CellProblemSpec,
    n: usize,
    tol: f64,
    max_iter: usize,
    config: MixedConfig,
) -> Result<EffectiveSample> {
    let (family, cert) = freeze_cell_family(base, certificate, spec);
    let problem = MixedProblem::new(family, cert.clone(), n, config)?;
    let state = problem.howard_solve(tol, max_iter)?;
    let estimator = estimate(&problem, &state, config.quad_degree)?;
    Ok(EffectiveSample {
        value: hamiltonian_value(&state, spec.sigma),
        state,
        estimator,
        spec: *spec,
        mesh_n: n,
        certificate: cert,
    })
}

/// Summary of a cached cell solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellValue {
    pub value: f64,
    pub eta: f64,
    pub iterations: usize,
}

/// Cell-problem evaluator with a shared cache keyed by the arguments rounded to
/// `1e-12`; the mesh size and tolerance are fixed per solver.
pub struct CellSolver {
    family: CoefficientFamily,
    certificate: CordesCertificate,
    n: usize,
    tol: f64,
    max_iter: usize,
    cache: Mutex<HashMap<[i64; 9], CellValue>>,
}

impl CellSolver {
    pub fn new(
        family: CoefficientFamily,
        certificate: CordesCertificate,
        n: usize,
        tol: f64,
        max_iter: usize,
    ) -> Self {
        Self {
            family,
            certificate,
            n,
            tol,
            max_iter,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn family(&self) -> &CoefficientFamily {
        &self.family
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn value(&self, spec: &CellProblemSpec) -> Result<CellValue> {
        let key = spec.key();
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let sample = solve_cell(
            &self.family,
            &self.certificate,
            spec,
            self.n,
            self.tol,
            self.max_iter,
        )?;
        let v = CellValue {
            value: sample.value,
            eta: sample.estimator.eta,
            iterations: sample.state.iterations,
        };
        self.cache.lock().expect("cache lock").insert(key, v);
        Ok(v)
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

/// Closed-form effective Hamiltonian of a benchmark family
/// `A = (a0 + alpha a1) B`: `max_alpha (-abar(alpha) B:R) - f`, where
/// `abar(alpha)` is the harmonic mean of `a0 + alpha a1` over the cell.
#[derive(Debug, Clone)]
pub struct ExactHamiltonian {
    b: Matrix2<f64>,
    f: f64,
    /// Harmonic mean for each control.
    harmonic: Vec<f64>,
}

/// Panels per axis and Gauss points per panel of the harmonic-mean rule.
const PANELS: usize = 8;
const PANEL_POINTS: usize = 32;

impl ExactHamiltonian {
    pub fn new(family: &CoefficientFamily) -> Result<Self> {
        let data = family
            .benchmark_data()
            .ok_or_else(|| Error::NoExactHamiltonian(family.name().to_string()))?;
        let (x, w) = gauss_legendre(PANEL_POINTS);
        let h = 1.0 / PANELS as f64;
        let nodes: Vec<(f64, f64)> = (0..PANELS)
            .flat_map(|k| {
                x.iter()
                    .zip(&w)
                    .map(move |(xi, wi)| ((k as f64 + xi) * h, wi * h))
            })
            .collect();
        let harmonic = family
            .controls()
            .values()
            .iter()
            .map(|&alpha| {
                let mut inv = 0.0;
                for &(y1, w1) in &nodes {
                    for &(y2, w2) in &nodes {
                        let y = Point2::new(y1, y2);
                        inv += w1 * w2 / ((data.a0)(&y) + alpha * (data.a1)(&y));
                    }
                }
                1.0 / inv
            })
            .collect();
        Ok(Self {
            b: data.b,
            f: data.f,
            harmonic,
        })
    }

    pub fn harmonic_means(&self) -> &[f64] {
        &self.harmonic
    }

    pub fn value(&self, r: &Matrix2<f64>) -> f64 {
        let br = self.b.component_mul(r).sum();
        self.harmonic
            .iter()
            .map(|a| -a * br)
            .fold(f64::NEG_INFINITY, f64::max)
            - self.f
    }

    /// Derivative with respect to `R` (at the maximising branch).
    pub fn gradient(&self, r: &Matrix2<f64>) -> Matrix2<f64> {
        let br = self.b.component_mul(r).sum();
        let a = self
            .harmonic
            .iter()
            .copied()
            .fold((f64::NEG_INFINITY, 0.0), |best, a| {
                if -a * br > best.0 {
                    (-a * br, a)
                } else {
                    best
                }
            })
            .1;
        -self.b * a
    }
}

/// `H(R)` of a benchmark family.
pub fn exact_h(family: &CoefficientFamily, r: &Matrix2<f64>) -> Result<f64> {
    Ok(ExactHamiltonian::new(family)?.value(r))
}

/// Relative forward-difference step of [`Hamiltonian::derivative`].
pub const FD_STEP: f64 = 1e-6;

/// Effective Hamiltonian abstraction used by the two-scale solver.
pub trait Hamiltonian: Send + Sync {
    fn value(&self, s: &Point2<f64>, p: &Vector2<f64>, r: &Matrix2<f64>) -> Result<f64>;

    /// `true` when the value does not depend on `p`.
    fn drift_free(&self) -> bool {
        false
    }

    /// Derivatives in `R` (as a symmetric matrix, so that
    /// `dH = D_R : dR` for symmetric `dR`) and in `p`, by forward differences
    /// with step `FD_STEP * max(1, |R|_max, |p|_max)`.
    fn derivative(
        &self,
        s: &Point2<f64>,
        p: &Vector2<f64>,
        r: &Matrix2<f64>,
    ) -> Result<(Matrix2<f64>, Vector2<f64>)> {
        let scale = 1f64.max(r.amax()).max(p.amax());
        let t = FD_STEP * scale;
        let h0 = self.value(s, p, r)?;
        let dr =
            |e: Matrix2<f64>| -> Result<f64> { Ok((self.value(s, p, &(r + e * t))? - h0) / t) };
        let d11 = dr(Matrix2::new(1.0, 0.0, 0.0, 0.0))?;
        let d22 = dr(Matrix2::new(0.0, 0.0, 0.0, 1.0))?;
        let d12 = 0.5 * dr(Matrix2::new(0.0, 1.0, 1.0, 0.0))?;
        let mut dp = Vector2::zeros();
        if !self.drift_free() {
            for k in 0..2 {
                let mut q = *p;
                q[k] += t;
                dp[k] = (self.value(s, &q, r)? - h0) / t;
            }
        }
        Ok((Matrix2::new(d11, d12, d12, d22), dp))
    }
}

impl Hamiltonian for ExactHamiltonian {
    fn value(&self, _s: &Point2<f64>, _p: &Vector2<f64>, r: &Matrix2<f64>) -> Result<f64> {
        Ok(ExactHamiltonian::value(self, r))
    }

    fn drift_free(&self) -> bool {
        true
    }

    fn derivative(
        &self,
        _s: &Point2<f64>,
        _p: &Vector2<f64>,
        r: &Matrix2<f64>,
    ) -> Result<(Matrix2<f64>, Vector2<f64>)> {
        Ok((self.gradient(r), Vector2::zeros()))
    }
}

/// Cell-problem Hamiltonian at fixed `sigma`.
pub struct CellHamiltonian {
    pub solver: Arc<CellSolver>,
    pub sigma: f64,
}

impl Hamiltonian for CellHamiltonian {
    fn value(&self, s: &Point2<f64>, p: &Vector2<f64>, r: &Matrix2<f64>) -> Result<f64> {
        // arguments the family ignores are dropped so the cache can hit
        let family = self.solver.family();
        let s = if family.x_dependent() {
            *s
        } else {
            Point2::origin()
        };
        let p = if family.drift_free() {
            Vector2::zeros()
        } else {
            *p
        };
        let spec = CellProblemSpec::new(s, p, *r, self.sigma)?;
        Ok(self.solver.value(&spec)?.value)
    }

    fn drift_free(&self) -> bool {
        self.solver.family().drift_free()
    }
}
