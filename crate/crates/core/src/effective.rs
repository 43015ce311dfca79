//! Two-scale least-squares solver for the homogenised Dirichlet problem
//! `u + H(D^2 u) = 0` on the unit square, and the same least-squares
//! machinery applied directly to the oscillatory problem.
//!
//! The discrete Hessian of a `P1` function is the element-wise derivative of
//! its `L^2`-projected gradient `w = M^{-1} G u`, symmetrised. The projection
//! is a dense operator, so Gauss-Newton steps keep `w` as an unknown tied to
//! `u` by the sparse constraint `M w = G u` and solve one sparse saddle
//! system per step.

use std::sync::{Arc, OnceLock};

use nalgebra::{Matrix2, Point2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{select_lambda, CoefficientFamily, SampleGrid};
use crate::error::{Error, Result};
use crate::fem::{Constraint, FeFunction, FunctionSpace, GradientProjector};
use crate::homogenization::{CellHamiltonian, CellSolver, ExactHamiltonian, Hamiltonian};
use crate::mesh::{Mesh, MeshFlavor};
use crate::mixed::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::quadrature::TriangleRule;
use crate::sparse::{dot, norm, SparseMatrix, TripletBuilder};

/// Value of an element operator with its derivatives in `R` (symmetric,
/// `dF = d_r : dR`) and in `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization {
    pub value: f64,
    pub d_r: Matrix2<f64>,
    pub d_p: Vector2<f64>,
}

/// Nonlinearity `F(x, p, R)` of a least-squares problem
/// `min |v + avg_T F(x_T, p_T, D^2_h v|_T)|`, where `x_T` is the barycenter
/// and `p_T` the projected gradient there.
pub trait ElementOperator: Sync {
    fn value(&self, x: &Point2<f64>, p: &Vector2<f64>, r: &Matrix2<f64>) -> Result<f64>;
    fn linearize(
        &self,
        x: &Point2<f64>,
        p: &Vector2<f64>,
        r: &Matrix2<f64>,
    ) -> Result<Linearization>;
}

/// The effective Hamiltonian as an element operator.
pub struct HamiltonianOperator<'a>(pub &'a dyn Hamiltonian);

impl ElementOperator for HamiltonianOperator<'_> {
    fn value(&self, x: &Point2<f64>, p: &Vector2<f64>, r: &Matrix2<f64>) -> Result<f64> {
        self.0.value(x, p, r)
    }

    fn linearize(
        &self,
        x: &Point2<f64>,
        p: &Vector2<f64>,
        r: &Matrix2<f64>,
    ) -> Result<Linearization> {
        let value = self.0.value(x, p, r)?;
        let (d_r, d_p) = self.0.derivative(x, p, r)?;
        Ok(Linearization { value, d_r, d_p })
    }
}

/// `sup_alpha {-A(x, x/eps):R - b(x, x/eps).p - f(x, x/eps)}`; the
/// least-squares form `v + F` requires `c = 1`.
pub struct OscillatoryOperator<'a> {
    family: &'a CoefficientFamily,
    eps: f64,
}

impl<'a> OscillatoryOperator<'a> {
    pub fn new(family: &'a CoefficientFamily, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon = {eps} must be positive"
            )));
        }
        Ok(Self { family, eps })
    }

    fn best(&self, x: &Point2<f64>, p: &Vector2<f64>, r: &Matrix2<f64>) -> Result<Linearization> {
        let y = Point2::from(x.coords / self.eps);
        let mut best: Option<Linearization> = None;
        for &alpha in self.family.controls().values() {
            let k = self.family.eval(x, &y, alpha);
            if (k.c - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "the oscillatory least-squares form needs c = 1, got c = {} at x = ({}, {})",
                    k.c, x.x, x.y
                )));
            }
            let value = -k.a.component_mul(r).sum() - k.b.dot(p) - k.f;
            if best.is_none_or(|b| value > b.value) {
                let a = 0.5 * (k.a + k.a.transpose());
                best = Some(Linearization {
                    value,
                    d_r: -a,
                    d_p: -k.b,
                });
            }
        }
        best.ok_or(Error::EmptyGrid)
    }
}

impl ElementOperator for OscillatoryOperator<'_> {
    fn value(&self, x: &Point2<f64>, p: &Vector2<f64>, r: &Matrix2<f64>) -> Result<f64> {
        Ok(self.best(x, p, r)?.value)
    }

    fn linearize(
        &self,
        x: &Point2<f64>,
        p: &Vector2<f64>,
        r: &Matrix2<f64>,
    ) -> Result<Linearization> {
        self.best(x, p, r)
    }
}

/// Discrete gradient and Hessian attributed to one element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementField {
    pub barycenter: Point2<f64>,
    pub gradient: Vector2<f64>,
    pub hessian: Matrix2<f64>,
}

/// `P1` spaces on a Dirichlet mesh of the unit square together with the
/// operators of the discrete Hessian.
pub struct OmegaDiscretization {
    mesh: Arc<Mesh>,
    u_space: Arc<FunctionSpace>,
    v_space: Arc<FunctionSpace>,
    w_space: Arc<FunctionSpace>,
    projector: GradientProjector,
    mass: SparseMatrix,
    /// Full-space dof of each interior dof.
    embed: Vec<usize>,
    /// Number of elements sharing each full-space dof.
    valence: Vec<usize>,
}

impl OmegaDiscretization {
    pub fn new(n: usize) -> Result<Self> {
        let mesh = Arc::new(Mesh::uniform(n, MeshFlavor::Dirichlet)?);
        let u_space = FunctionSpace::new(mesh.clone(), 1, 1, Constraint::Dirichlet)?;
        Self::with_source(u_space)
    }

    /// Discretisation whose scalar unknowns live in `u_space` (a `P1` space
    /// on a Dirichlet mesh, with or without boundary dofs).
    pub fn with_source(u_space: Arc<FunctionSpace>) -> Result<Self> {
        let mesh = u_space.mesh().clone();
        if mesh.flavor() != MeshFlavor::Dirichlet
            || u_space.degree() != 1
            || u_space.components() != 1
        {
            return Err(Error::InvalidArgument(
                "discrete Hessians need a scalar P1 space on a dirichlet-flavor mesh".into(),
            ));
        }
        let v_space = FunctionSpace::new(mesh.clone(), 1, 1, Constraint::None)?;
        let w_space = FunctionSpace::new(mesh.clone(), 1, 2, Constraint::None)?;
        let projector = GradientProjector::new(w_space.clone(), u_space.clone())?;
        let mass = v_space.mass_matrix();
        let mut embed = vec![usize::MAX; u_space.n_dofs()];
        let mut valence = vec![0; v_space.n_dofs()];
        for e in 0..mesh.num_elements() {
            for (du, dv) in u_space.element_dofs(e).iter().zip(v_space.element_dofs(e)) {
                let dv = dv.expect("unconstrained space has every dof");
                valence[dv] += 1;
                if let Some(du) = du {
                    embed[*du] = dv;
                }
            }
        }
        Ok(Self {
            mesh,
            u_space,
            v_space,
            w_space,
            projector,
            mass,
            embed,
            valence,
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    /// Space of the unknowns.
    pub fn u_space(&self) -> &Arc<FunctionSpace> {
        &self.u_space
    }

    /// Unconstrained scalar `P1` space (residuals, averaged fields).
    pub fn v_space(&self) -> &Arc<FunctionSpace> {
        &self.v_space
    }

    fn nv(&self) -> usize {
        self.v_space.n_dofs()
    }

    /// Coefficients of the projected gradient, component-major.
    pub fn project_gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.projector.project_coeffs(u)
    }

    pub fn element_fields(&self, w: &[f64]) -> Vec<ElementField> {
        let nv = self.nv();
        (0..self.mesh.num_elements())
            .map(|e| {
                let geo = self.mesh.geometry(e);
                let mut dw = Matrix2::zeros();
                let mut p = Vector2::zeros();
                for (k, d) in self.w_space.element_dofs(e).iter().enumerate() {
                    let d = d.expect("unconstrained space has every dof");
                    let wk = Vector2::new(w[d], w[nv + d]);
                    dw += wk * geo.grad_bary[k].transpose();
                    p += wk / 3.0;
                }
                ElementField {
                    barycenter: geo.barycenter,
                    gradient: p,
                    hessian: 0.5 * (dw + dw.transpose()),
                }
            })
            .collect()
    }

    /// Vertex values as the mean of the values on the incident elements.
    pub fn nodal_average(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.mesh.num_elements() {
            return Err(Error::DimensionMismatch(format!(
                "{} element values for {} elements",
                values.len(),
                self.mesh.num_elements()
            )));
        }
        let mut out = vec![0.0; self.nv()];
        for (e, v) in values.iter().enumerate() {
            for d in self.v_space.element_dofs(e) {
                out[d.expect("unconstrained space has every dof")] += v;
            }
        }
        for (o, n) in out.iter_mut().zip(&self.valence) {
            *o /= *n as f64;
        }
        Ok(out)
    }

    /// Extends interior coefficients by zero to the full space.
    pub fn embed(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nv()];
        for (k, &d) in self.embed.iter().enumerate() {
            out[d] = u[k];
        }
        out
    }
}

/// Symmetrised element derivatives of the `L^2`-projected gradient of a
/// `P1` function on a Dirichlet mesh.
pub fn discrete_hessian(u: &FeFunction) -> Result<Vec<Matrix2<f64>>> {
    let disc = OmegaDiscretization::with_source(u.space().clone())?;
    let w = disc.project_gradient(u.coeffs())?;
    Ok(disc
        .element_fields(&w)
        .into_iter()
        .map(|f| f.hessian)
        .collect())
}

/// Nodal average of `H` evaluated at each element's Hessian (with `s` the
/// barycenter and `p = 0`, i.e. for drift-free Hamiltonians).
pub fn averaged_hamiltonian(
    hessians: &[Matrix2<f64>],
    h: &dyn Hamiltonian,
    mesh: &Arc<Mesh>,
) -> Result<FeFunction> {
    if hessians.len() != mesh.num_elements() {
        return Err(Error::DimensionMismatch(format!(
            "{} Hessians for {} elements",
            hessians.len(),
            mesh.num_elements()
        )));
    }
    let values = hessians
        .par_iter()
        .enumerate()
        .map(|(e, r)| {
            h.value(&mesh.geometry(e).barycenter, &Vector2::zeros(), r)
                .map_err(|source| Error::Element {
                    element: e,
                    source: Box::new(source),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let disc = OmegaDiscretization::new(mesh.n())?;
    FeFunction::new(disc.v_space.clone(), disc.nodal_average(&values)?)
}

/// P1 solution of `u - div(a_bar grad u) = f` with homogeneous Dirichlet
/// data; `space` must eliminate the boundary dofs.
pub fn linear_oracle(
    space: &Arc<FunctionSpace>,
    a_bar: &Matrix2<f64>,
    f: f64,
) -> Result<FeFunction> {
    if space.constraint() != Constraint::Dirichlet || space.components() != 1 {
        return Err(Error::InvalidArgument(
            "the linear oracle needs a scalar space with Dirichlet elimination".into(),
        ));
    }
    let k = space.assemble_scalar(|_, vi, vj, gi, gj| gi.dot(&(a_bar * gj)) + vi * vj);
    let rhs: Vec<f64> = space.basis_integrals().iter().map(|b| f * b).collect();
    FeFunction::new(space.clone(), k.lu()?.solve(&rhs)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    Zero,
    /// Linear oracle with `a_bar = B`, `f` of the benchmark; zero for other
    /// families.
    #[default]
    Linear,
}

/// Vertices at which the residual `v + avg F` enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualNodes {
    /// All vertices: the `L^2(Omega)` norm of the `P1` residual.
    #[default]
    All,
    /// Interior vertices only; boundary values of the averaged field are
    /// dropped, which makes the system square.
    Interior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Stop when the reduced gradient norm or the relative objective decrease
    /// of an accepted step falls below this.
    pub tol: f64,
    /// Objective evaluations allowed.
    pub max_evaluations: usize,
    pub initial: InitialGuess,
    pub residual_nodes: ResidualNodes,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_evaluations: 500,
            initial: InitialGuess::Linear,
            residual_nodes: ResidualNodes::All,
        }
    }
}

/// One accepted optimizer step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub step: f64,
    pub damping: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct EffectiveSolution {
    pub u: FeFunction,
    /// Averaged nonlinearity at the solution.
    pub htilde: FeFunction,
    pub objective: f64,
    pub gradient_norm: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
}

struct Evaluation {
    u: Vec<f64>,
    fields: Vec<ElementField>,
    averaged: Vec<f64>,
    residual: Vec<f64>,
    objective: f64,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 30;
const DAMPING_MIN: f64 = 1e-12;
const DAMPING_MAX: f64 = 1e8;

/// Damped Gauss-Newton minimisation of `|v + avg F|^2_{L^2}` over the
/// unknowns of `disc`.
pub struct LeastSquares<'a> {
    disc: &'a OmegaDiscretization,
    op: &'a dyn ElementOperator,
    /// Weight of each vertex residual (0 or 1).
    row_weight: Vec<f64>,
    symbolic: OnceLock<faer::sparse::linalg::solvers::SymbolicLu<usize>>,
}

impl<'a> LeastSquares<'a> {
    pub fn new(
        disc: &'a OmegaDiscretization,
        op: &'a dyn ElementOperator,
        nodes: ResidualNodes,
    ) -> Self {
        let row_weight = (0..disc.nv())
            .map(|v| match nodes {
                ResidualNodes::Interior if disc.mesh.is_boundary_vertex(v) => 0.0,
                _ => 1.0,
            })
            .collect();
        Self {
            disc,
            op,
            row_weight,
            symbolic: OnceLock::new(),
        }
    }

    fn evaluate(&self, u: Vec<f64>) -> Result<Evaluation> {
        let w = self.disc.project_gradient(&u)?;
        let fields = self.disc.element_fields(&w);
        let values = fields
            .par_iter()
            .enumerate()
            .map(|(e, f)| {
                self.op
                    .value(&f.barycenter, &f.gradient, &f.hessian)
                    .map_err(|source| Error::Element {
                        element: e,
                        source: Box::new(source),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let averaged = self.disc.nodal_average(&values)?;
        let residual: Vec<f64> = self
            .disc
            .embed(&u)
            .iter()
            .zip(&averaged)
            .zip(&self.row_weight)
            .map(|((a, b), w)| w * (a + b))
            .collect();
        let objective = self.disc.mass.quadratic(&residual, &residual);
        Ok(Evaluation {
            u,
            fields,
            averaged,
            residual,
            objective,
        })
    }

    /// Objective `|v + avg F|^2` at interior coefficients `u`.
    pub fn objective(&self, u: &[f64]) -> Result<f64> {
        Ok(self.evaluate(u.to_vec())?.objective)
    }

    /// Jacobian `[E | J_w]` of the vertex residual with respect to `(u, w)`.
    fn jacobian(&self, ev: &Evaluation) -> Result<SparseMatrix> {
        let disc = self.disc;
        let (ni, nv) = (disc.u_space.n_dofs(), disc.nv());
        let lin = ev
            .fields
            .par_iter()
            .enumerate()
            .map(|(e, f)| {
                self.op
                    .linearize(&f.barycenter, &f.gradient, &f.hessian)
                    .map_err(|source| Error::Element {
                        element: e,
                        source: Box::new(source),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut t = TripletBuilder::with_capacity(nv, ni + 2 * nv, ni + 18 * lin.len());
        for (k, &d) in disc.embed.iter().enumerate() {
            t.push(d, k, self.row_weight[d]);
        }
        for (e, l) in lin.iter().enumerate() {
            let geo = disc.mesh.geometry(e);
            let dofs: Vec<usize> = disc
                .v_space
                .element_dofs(e)
                .iter()
                .map(|d| d.expect("full space"))
                .collect();
            for (k, &dk) in dofs.iter().enumerate() {
                let g = l.d_r * geo.grad_bary[k] + l.d_p / 3.0;
                for &di in &dofs {
                    let scale = self.row_weight[di] / disc.valence[di] as f64;
                    for c in 0..2 {
                        t.push(di, ni + c * nv + dk, scale * g[c]);
                    }
                }
            }
        }
        Ok(t.build())
    }

    /// Gradient of the objective with respect to the interior coefficients.
    fn reduced_gradient(&self, j: &SparseMatrix, mr: &[f64]) -> Result<Vec<f64>> {
        let disc = self.disc;
        let (ni, nv) = (disc.u_space.n_dofs(), disc.nv());
        let full = j.transpose_mul_vec(mr);
        let mut g: Vec<f64> = full[..ni].iter().map(|v| 2.0 * v).collect();
        for c in 0..2 {
            let z = disc
                .projector
                .mass_solve(&full[ni + c * nv..ni + (c + 1) * nv])?;
            let gz = disc.projector.coupling(c).transpose_mul_vec(&z);
            for (gi, v) in g.iter_mut().zip(gz) {
                *gi += 2.0 * v;
            }
        }
        Ok(g)
    }

    /// Solves the damped Gauss-Newton saddle system; returns the step in the
    /// interior coefficients.
    fn step(&self, j: &SparseMatrix, mr: &[f64], damping: f64) -> Result<Vec<f64>> {
        let disc = self.disc;
        let (ni, nv) = (disc.u_space.n_dofs(), disc.nv());
        let nz = ni + 2 * nv;
        let mj = disc.mass.matmul(j)?;
        let normal = j.transpose().matmul(&mj)?;
        let mut t =
            TripletBuilder::with_capacity(nz + 2 * nv, nz + 2 * nv, normal.nnz() + 8 * nv * 7);
        t.extend(normal.iter());
        let h2 = disc.mesh.h().powi(2);
        for k in 0..ni {
            t.push(k, k, damping * h2);
        }
        for c in 0..2 {
            let row0 = nz + c * nv;
            for (r, col, v) in disc.projector.coupling(c).iter() {
                t.push(row0 + r, col, -v);
                t.push(col, row0 + r, -v);
            }
            for (r, col, v) in disc.mass.iter() {
                t.push(row0 + r, ni + c * nv + col, v);
                t.push(ni + c * nv + col, row0 + r, v);
            }
        }
        let k = t.build();
        let symbolic = match self.symbolic.get() {
            Some(s) => s,
            None => {
                let s = k.symbolic_lu()?;
                self.symbolic.get_or_init(|| s)
            }
        };
        let mut rhs = vec![0.0; nz + 2 * nv];
        for (r, v) in rhs.iter_mut().zip(j.transpose_mul_vec(mr)) {
            *r = -v;
        }
        let d = k.lu_with_symbolic(symbolic)?.solve(&rhs)?;
        Ok(d[..ni].to_vec())
    }

    pub fn minimize(&self, u0: Vec<f64>, cfg: &OptimizerConfig) -> Result<EffectiveSolution> {
        if !(cfg.tol > 0.0) || cfg.max_evaluations == 0 {
            return Err(Error::InvalidArgument(
                "optimizer tolerance and budget must be positive".into(),
            ));
        }
        if u0.len() != self.disc.u_space.n_dofs() {
            return Err(Error::DimensionMismatch("initial guess".into()));
        }
        let mut evaluations = 1;
        let mut cur = self.evaluate(u0)?;
        let mut damping = 1e-6;
        let mut trace = Vec::new();
        let mut gradient_norm = f64::INFINITY;
        let mut converged = false;
        'outer: while evaluations < cfg.max_evaluations {
            if cur.objective == 0.0 {
                gradient_norm = 0.0;
                converged = true;
                break;
            }
            let j = self.jacobian(&cur)?;
            let mr = self.disc.mass.mul_vec(&cur.residual);
            let g = self.reduced_gradient(&j, &mr)?;
            gradient_norm = norm(&g);
            if gradient_norm <= cfg.tol {
                converged = true;
                break;
            }
            loop {
                let d = self.step(&j, &mr, damping)?;
                let slope = dot(&g, &d);
                if slope >= 0.0 {
                    damping *= 10.0;
                    if damping > DAMPING_MAX {
                        break 'outer;
                    }
                    continue;
                }
                let mut t = 1.0;
                for _ in 0..MAX_BACKTRACKS {
                    if evaluations >= cfg.max_evaluations {
                        break 'outer;
                    }
                    let trial: Vec<f64> = cur.u.iter().zip(&d).map(|(u, d)| u + t * d).collect();
                    let next = self.evaluate(trial)?;
                    evaluations += 1;
                    if next.objective <= cur.objective + ARMIJO * t * slope {
                        let decrease = (cur.objective - next.objective) / cur.objective;
                        cur = next;
                        trace.push(IterationRecord {
                            iteration: trace.len() + 1,
                            objective: cur.objective,
                            gradient_norm,
                            step: t,
                            damping,
                            evaluations,
                        });
                        damping = (damping / 3.0).max(DAMPING_MIN);
                        if decrease < cfg.tol {
                            converged = true;
                            break 'outer;
                        }
                        continue 'outer;
                    }
                    t *= 0.5;
                }
                damping *= 10.0;
                if damping > DAMPING_MAX {
                    break 'outer;
                }
            }
        }
        let u = FeFunction::new(self.disc.u_space.clone(), cur.u)?;
        let htilde = FeFunction::new(self.disc.v_space.clone(), cur.averaged)?;
        Ok(EffectiveSolution {
            u,
            htilde,
            objective: cur.objective,
            gradient_norm,
            evaluations,
            iterations: trace.len(),
            converged,
            trace,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HamiltonianMode {
    /// Cell problems on the periodic mesh.
    #[default]
    Cell,
    /// Closed form of the benchmark family.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoScaleConfig {
    pub omega_n: usize,
    pub cell_n: usize,
    pub sigma: f64,
    pub mode: HamiltonianMode,
    pub optimizer: OptimizerConfig,
    pub cell_tol: f64,
    pub cell_max_iter: usize,
    /// Points per axis of the Cordes sample grid.
    pub samples: usize,
}

impl Default for TwoScaleConfig {
    fn default() -> Self {
        Self {
            omega_n: 8,
            cell_n: 4,
            sigma: 0.1,
            mode: HamiltonianMode::Cell,
            optimizer: OptimizerConfig::default(),
            cell_tol: DEFAULT_TOL,
            cell_max_iter: DEFAULT_MAX_ITER,
            samples: crate::control::DEFAULT_SAMPLES,
        }
    }
}

impl TwoScaleConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.omega_n > 0
            && self.cell_n > 0
            && self.sigma > 0.0
            && self.sigma.is_finite()
            && self.optimizer.tol > 0.0
            && self.optimizer.max_evaluations > 0
            && self.cell_tol > 0.0
            && self.cell_max_iter > 0
            && self.samples > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "two-scale configuration {self:?}"
            )))
        }
    }
}

/// Starting coefficients for `family` on `space`.
pub fn initial_guess(
    space: &Arc<FunctionSpace>,
    family: &CoefficientFamily,
    kind: InitialGuess,
) -> Result<Vec<f64>> {
    match (kind, family.benchmark_data()) {
        (InitialGuess::Linear, Some(data)) => {
            Ok(linear_oracle(space, &data.b, data.f)?.into_coeffs())
        }
        _ => Ok(vec![0.0; space.n_dofs()]),
    }
}

/// Effective Hamiltonian selected by the configuration.
pub fn build_hamiltonian(
    config: &TwoScaleConfig,
    family: &CoefficientFamily,
) -> Result<Box<dyn Hamiltonian>> {
    match config.mode {
        HamiltonianMode::Exact => Ok(Box::new(ExactHamiltonian::new(family)?)),
        HamiltonianMode::Cell => {
            let cert = select_lambda(family, &SampleGrid::new(config.samples))?;
            let solver = CellSolver::new(
                family.clone(),
                cert,
                config.cell_n,
                config.cell_tol,
                config.cell_max_iter,
            );
            Ok(Box::new(CellHamiltonian {
                solver: Arc::new(solver),
                sigma: config.sigma,
            }))
        }
    }
}

/// Least-squares solution of `u + H(D^2 u) = 0` on the unit square.
pub fn solve_effective(
    config: &TwoScaleConfig,
    family: &CoefficientFamily,
) -> Result<EffectiveSolution> {
    config.validate()?;
    let h = build_hamiltonian(config, family)?;
    solve_with_hamiltonian(config.omega_n, &*h, family, &config.optimizer)
}

pub fn solve_with_hamiltonian(
    n: usize,
    h: &dyn Hamiltonian,
    family: &CoefficientFamily,
    optimizer: &OptimizerConfig,
) -> Result<EffectiveSolution> {
    let disc = OmegaDiscretization::new(n)?;
    let op = HamiltonianOperator(h);
    let u0 = initial_guess(disc.u_space(), family, optimizer.initial)?;
    LeastSquares::new(&disc, &op, optimizer.residual_nodes).minimize(u0, optimizer)
}

/// Least-squares solution of the oscillatory problem at scale `eps`, with
/// coefficients evaluated at element barycenters.
pub fn solve_eps_problem(
    eps: f64,
    n: usize,
    family: &CoefficientFamily,
    optimizer: &OptimizerConfig,
) -> Result<EffectiveSolution> {
    let op = OscillatoryOperator::new(family, eps)?;
    let disc = OmegaDiscretization::new(n)?;
    let u0 = initial_guess(disc.u_space(), family, optimizer.initial)?;
    LeastSquares::new(&disc, &op, optimizer.residual_nodes).minimize(u0, optimizer)
}

/// Relative `L^2` and `L^infinity` distances of `approx` from `reference`.
/// The `L^2` norms use a degree-4 rule on the reference mesh and the
/// maximum is taken over reference vertices, which is exact for nested
/// `P1` meshes.
pub fn relative_errors(approx: &FeFunction, reference: &FeFunction) -> Result<(f64, f64)> {
    let mesh = reference.space().mesh();
    let rule = TriangleRule::with_degree(4);
    let (mut diff2, mut ref2) = (0.0, 0.0);
    for e in 0..mesh.num_elements() {
        let ev = reference.space().element_values(e, &rule);
        for q in reference.eval_element(e, &ev) {
            let a = approx.eval_point(&q.point).value[0];
            diff2 += q.weight * (a - q.value[0]).powi(2);
            ref2 += q.weight * q.value[0].powi(2);
        }
    }
    let (mut diff_max, mut ref_max) = (0.0f64, 0.0f64);
    for p in mesh.vertices() {
        let r = reference.eval_point(p).value[0];
        diff_max = diff_max.max((approx.eval_point(p).value[0] - r).abs());
        ref_max = ref_max.max(r.abs());
    }
    if ref2 == 0.0 || ref_max == 0.0 {
        return Err(Error::InvalidArgument("reference solution vanishes".into()));
    }
    Ok(((diff2 / ref2).sqrt(), diff_max / ref_max))
}
