//! Discrete mixed formulation of the renormalised periodic HJB problem and
//! its solution by policy iteration.
//!
//! Unknowns are ordered `[w_1, w_2, u, m, mu_m]`, where `mu_m` enforces zero
//! mean of `m`. Zero mean of `w` needs no multiplier: testing with a constant
//! `w' = e` gives `sigma2 int w . e` (as `L_lambda(e, 0) = 0`, `rot e = 0`
//! and `int grad u = 0` on the torus), so the system on the full periodic
//! space forces `int w = 0` and has the same unique solution.
//!
//! For a fixed control field the form is affine, so the residual at `x`
//! equals `K(alpha(x)) x - r(alpha(x))` with `alpha(x)` the pointwise argmax;
//! a Newton step is therefore one frozen-policy linear solve.

use std::sync::{Arc, OnceLock};

use nalgebra::{Matrix2, Point2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{
    bellman_max_scaled, scaled_coefficients, CoefficientFamily, CordesCertificate,
    ScaledCoefficients,
};
use crate::error::{Error, Result};
use crate::fem::{Constraint, ElementValues, FeFunction, FunctionSpace, DEFAULT_QUAD_DEGREE};
use crate::mesh::{Mesh, MeshFlavor};
use crate::quadrature::TriangleRule;
use crate::sparse::{dot, LuSolver, SparseMatrix, TripletBuilder};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 50;
const MAX_HALVINGS: usize = 10;

/// Constants of the stability analysis for given Cordes parameters (`n = 2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstants {
    pub lambda: f64,
    pub delta: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    /// Monotonicity constant.
    pub c_m: f64,
    /// Lipschitz constant.
    pub c_l: f64,
    /// Bound of the coupling form.
    pub c_b: f64,
    /// Inf-sup constant of the coupling form.
    pub c_b_inf: f64,
    /// Quasi-optimality constant.
    pub c_e: f64,
}

impl StabilityConstants {
    pub fn new(lambda: f64, delta: f64) -> Self {
        let n = 2.0;
        let pi2 = std::f64::consts::PI.powi(2);
        let s = (1.0 - delta).sqrt();
        let sigma1 = 1.0 - 0.5 * s;
        let sigma2_tilde = (1.0 - s) / 2.0 + 1.0 / (4.0 * (1.0 - s));
        let sigma2 = lambda * sigma2_tilde;
        let c_m = 0.25 * (1.0 - s);
        let c_l = 2.0 + 2f64.sqrt() * s + sigma1 + sigma2_tilde * (0.5 + n * lambda / pi2);
        let c_b = (lambda.recip() * (0.5 + n * lambda / pi2)).sqrt();
        let c_b_inf = (lambda.recip() / (2.0 + n * lambda / pi2)).sqrt();
        let c_e = 2.0 * c_l / c_m * (1.0 + c_b / c_b_inf);
        Self {
            lambda,
            delta,
            sigma1,
            sigma2,
            c_m,
            c_l,
            c_b,
            c_b_inf,
            c_e,
        }
    }

    /// Upper bound for the squared error given the estimator terms
    /// (`term_rot`, `term_gap` already carry their weights).
    pub fn reliability_bound(&self, term_f: f64, term_rot: f64, term_gap: f64) -> f64 {
        2.0 / self.c_m * (term_f / self.c_m + term_rot + term_gap)
    }

    /// Factor `C_L + (1 - delta)/2` of the efficiency estimate.
    pub fn efficiency_factor(&self) -> f64 {
        self.c_l + (1.0 - self.delta) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierSpace {
    /// `M_h = {0}`
    #[default]
    Trivial,
    /// Periodic zero-mean functions of the degree of `u`.
    ZeroMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedConfig {
    pub degree_w: usize,
    pub degree_u: usize,
    pub multiplier: MultiplierSpace,
    pub quad_degree: usize,
}

impl Default for MixedConfig {
    fn default() -> Self {
        Self {
            degree_w: 1,
            degree_u: 1,
            multiplier: MultiplierSpace::Trivial,
            quad_degree: DEFAULT_QUAD_DEGREE,
        }
    }
}

/// Offsets of the unknown blocks.
#[derive(Debug, Clone, Copy)]
struct Layout {
    nw: usize,
    nu: usize,
    nm: usize,
}

impl Layout {
    fn u0(&self) -> usize {
        2 * self.nw
    }
    fn m0(&self) -> usize {
        2 * self.nw + self.nu
    }
    /// Dimension of `X_h`.
    fn nx(&self) -> usize {
        2 * self.nw + self.nu
    }
    fn mu0(&self) -> usize {
        self.m0() + self.nm
    }
    fn total(&self) -> usize {
        self.mu0() + usize::from(self.nm > 0)
    }
}

/// Fields of a discrete pair at one quadrature point.
#[derive(Debug, Clone, Copy)]
pub struct QpEval {
    pub point: Point2<f64>,
    pub weight: f64,
    pub w: Vector2<f64>,
    pub dw: Matrix2<f64>,
    pub u: f64,
    pub grad_u: Vector2<f64>,
    /// `F_gamma[(w, u)]`
    pub f_gamma: f64,
    /// Index of the maximising control.
    pub policy: usize,
}

impl QpEval {
    pub fn rot(&self) -> f64 {
        self.dw[(0, 1)] - self.dw[(1, 0)]
    }

    pub fn div(&self) -> f64 {
        self.dw.trace()
    }

    /// `grad u - w`
    pub fn gap(&self) -> Vector2<f64> {
        self.grad_u - self.w
    }
}

/// Test-function features at one quadrature point: `L_lambda`, `rot`, gap.
#[derive(Clone, Copy)]
struct Feature {
    l: f64,
    rot: f64,
    gap: Vector2<f64>,
}

pub struct MixedProblem {
    family: CoefficientFamily,
    certificate: CordesCertificate,
    frozen_x: Point2<f64>,
    config: MixedConfig,
    constants: StabilityConstants,
    w_space: Arc<FunctionSpace>,
    u_space: Arc<FunctionSpace>,
    m_space: Option<Arc<FunctionSpace>>,
    layout: Layout,
    nq: usize,
    w_values: Vec<ElementValues>,
    u_values: Vec<ElementValues>,
    /// Indexed by `(e * nq + q) * controls + a`.
    scaled: Vec<ScaledCoefficients>,
    mean_w: Vec<f64>,
    mean_m: Vec<f64>,
    coupling: Option<SparseMatrix>,
    symbolic: OnceLock<faer::sparse::linalg::solvers::SymbolicLu<usize>>,
    gram: OnceLock<Result<LuSolver, String>>,
}

impl std::fmt::Debug for MixedProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MixedProblem")
            .field("family", &self.family.name())
            .field("certificate", &self.certificate)
            .field("n", &self.w_space.mesh().n())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl MixedProblem {
    /// Periodic problem on an `n x n` cell mesh.
    pub fn new(
        family: CoefficientFamily,
        certificate: CordesCertificate,
        n: usize,
        config: MixedConfig,
    ) -> Result<Self> {
        let mesh = Arc::new(Mesh::uniform(n, MeshFlavor::Periodic)?);
        Self::on_mesh(family, certificate, mesh, Point2::origin(), config)
    }

    pub fn on_mesh(
        family: CoefficientFamily,
        certificate: CordesCertificate,
        mesh: Arc<Mesh>,
        frozen_x: Point2<f64>,
        config: MixedConfig,
    ) -> Result<Self> {
        if mesh.flavor() != MeshFlavor::Periodic {
            return Err(Error::InvalidArgument(
                "cell problems need a periodic mesh".into(),
            ));
        }
        if !(certificate.lambda > 0.0 && certificate.delta > 0.0 && certificate.delta < 1.0) {
            return Err(Error::CordesFailure(format!("{certificate:?}")));
        }
        let w_space = FunctionSpace::new(mesh.clone(), config.degree_w, 2, Constraint::ZeroMean)?;
        let u_space = FunctionSpace::new(mesh.clone(), config.degree_u, 1, Constraint::None)?;
        let m_space = match config.multiplier {
            MultiplierSpace::Trivial => None,
            MultiplierSpace::ZeroMean => Some(FunctionSpace::new(
                mesh.clone(),
                config.degree_u,
                1,
                Constraint::ZeroMean,
            )?),
        };
        let layout = Layout {
            nw: w_space.n_dofs(),
            nu: u_space.n_dofs(),
            nm: m_space.as_ref().map_or(0, |s| s.n_dofs()),
        };
        let rule = TriangleRule::with_degree(config.quad_degree.max(1));
        let nq = rule.len();
        let ne = mesh.num_elements();
        let w_values: Vec<_> = (0..ne)
            .into_par_iter()
            .map(|e| w_space.element_values(e, &rule))
            .collect();
        let u_values: Vec<_> = (0..ne)
            .into_par_iter()
            .map(|e| u_space.element_values(e, &rule))
            .collect();
        let scaled: Vec<ScaledCoefficients> = (0..ne)
            .into_par_iter()
            .map(|e| -> Result<Vec<ScaledCoefficients>> {
                let mut out = Vec::new();
                for p in &w_values[e].points {
                    out.extend(
                        scaled_coefficients(&family, &certificate, &frozen_x, p).map_err(
                            |err| Error::Element {
                                element: e,
                                source: Box::new(err),
                            },
                        )?,
                    );
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let mean_w = w_space.basis_integrals();
        let mean_m = m_space.as_ref().map_or(Vec::new(), |s| s.basis_integrals());
        let constants = StabilityConstants::new(certificate.lambda, certificate.delta);

        let mut problem = Self {
            family,
            certificate,
            frozen_x,
            config,
            constants,
            w_space,
            u_space,
            m_space,
            layout,
            nq,
            w_values,
            u_values,
            scaled,
            mean_w,
            mean_m,
            coupling: None,
            symbolic: OnceLock::new(),
            gram: OnceLock::new(),
        };
        if problem.m_space.is_some() {
            problem.coupling = Some(problem.assemble_coupling());
        }
        Ok(problem)
    }

    pub fn family(&self) -> &CoefficientFamily {
        &self.family
    }

    pub fn certificate(&self) -> &CordesCertificate {
        &self.certificate
    }

    pub fn constants(&self) -> &StabilityConstants {
        &self.constants
    }

    pub fn config(&self) -> &MixedConfig {
        &self.config
    }

    pub fn frozen_x(&self) -> Point2<f64> {
        self.frozen_x
    }

    pub fn w_space(&self) -> &Arc<FunctionSpace> {
        &self.w_space
    }

    pub fn u_space(&self) -> &Arc<FunctionSpace> {
        &self.u_space
    }

    pub fn m_space(&self) -> Option<&Arc<FunctionSpace>> {
        self.m_space.as_ref()
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        self.w_space.mesh()
    }

    /// Dimension of `X_h`.
    pub fn dim_x(&self) -> usize {
        self.layout.nx()
    }

    /// Length of the full unknown vector.
    pub fn dim(&self) -> usize {
        self.layout.total()
    }

    pub fn quad_points(&self) -> usize {
        self.nq
    }

    fn n_controls(&self) -> usize {
        self.family.controls().len()
    }

    fn scaled_at(&self, e: usize, q: usize) -> &[ScaledCoefficients] {
        let nc = self.n_controls();
        let k = (e * self.nq + q) * nc;
        &self.scaled[k..k + nc]
    }

    /// Global indices of the local `X_h` dofs of element `e`, ordered
    /// `[w_1 locals, w_2 locals, u locals]`.
    fn local_indices(&self, e: usize) -> Vec<usize> {
        let wd = self.w_space.element_dofs(e);
        let ud = self.u_space.element_dofs(e);
        let mut idx = Vec::with_capacity(2 * wd.len() + ud.len());
        for c in 0..2 {
            idx.extend(wd.iter().map(|d| c * self.layout.nw + d.expect("periodic")));
        }
        idx.extend(ud.iter().map(|d| self.layout.u0() + d.expect("periodic")));
        idx
    }

    /// Test features of the local dofs at quadrature point `q`, plus the
    /// operator value `l_j` (scaled, without source) of each local dof.
    fn features(
        &self,
        e: usize,
        q: usize,
        s: &ScaledCoefficients,
        feat: &mut Vec<Feature>,
        op: &mut Vec<f64>,
    ) {
        feat.clear();
        op.clear();
        let wv = &self.w_values[e];
        let uv = &self.u_values[e];
        let nlw = self.w_space.local_count();
        let lambda = self.certificate.lambda;
        for c in 0..2 {
            for k in 0..nlw {
                let g = wv.grad(q, k);
                let phi = wv.value(q, k);
                op.push(-(s.a[(c, 0)] * g.x + s.a[(c, 1)] * g.y));
                let mut gap = Vector2::zeros();
                gap[c] = -phi;
                feat.push(Feature {
                    l: -g[c],
                    rot: if c == 0 { g.y } else { -g.x },
                    gap,
                });
            }
        }
        for k in 0..self.u_space.local_count() {
            let g = uv.grad(q, k);
            let psi = uv.value(q, k);
            op.push(-s.b.dot(&g) + s.c * psi);
            feat.push(Feature {
                l: lambda * psi,
                rot: 0.0,
                gap: g,
            });
        }
    }

    /// Fields of the pair stored in `x` at every quadrature point of `e`.
    pub fn eval_element(&self, e: usize, x: &[f64]) -> Vec<QpEval> {
        let wv = &self.w_values[e];
        let uv = &self.u_values[e];
        let wd = self.w_space.element_dofs(e);
        let ud = self.u_space.element_dofs(e);
        let nw = self.layout.nw;
        let u0 = self.layout.u0();
        (0..self.nq)
            .map(|q| {
                let mut w = Vector2::zeros();
                let mut dw = Matrix2::zeros();
                for (k, d) in wd.iter().enumerate() {
                    let i = d.expect("periodic");
                    let phi = wv.value(q, k);
                    let g = wv.grad(q, k);
                    for c in 0..2 {
                        let a = x[c * nw + i];
                        w[c] += a * phi;
                        dw[(c, 0)] += a * g.x;
                        dw[(c, 1)] += a * g.y;
                    }
                }
                let mut u = 0.0;
                let mut grad_u = Vector2::zeros();
                for (k, d) in ud.iter().enumerate() {
                    let a = x[u0 + d.expect("periodic")];
                    u += a * uv.value(q, k);
                    grad_u += uv.grad(q, k) * a;
                }
                let (f_gamma, policy) = bellman_max_scaled(self.scaled_at(e, q), &dw, &grad_u, u);
                QpEval {
                    point: wv.points[q],
                    weight: wv.weights[q],
                    w,
                    dw,
                    u,
                    grad_u,
                    f_gamma,
                    policy,
                }
            })
            .collect()
    }

    /// `int grad(chi_i) . (grad u_j - w_j)` over `M_h x X_h`.
    fn assemble_coupling(&self) -> SparseMatrix {
        let ms = self.m_space.as_ref().expect("multiplier space");
        let rule = TriangleRule::with_degree(self.config.quad_degree);
        let mut t = TripletBuilder::new(self.layout.nm, self.layout.nx());
        let mut feat = Vec::new();
        let mut op = Vec::new();
        for e in 0..self.mesh().num_elements() {
            let mv = ms.element_values(e, &rule);
            let idx = self.local_indices(e);
            for q in 0..self.nq {
                let s = self.scaled_at(e, q)[0];
                self.features(e, q, &s, &mut feat, &mut op);
                for (l, d) in ms.element_dofs(e).iter().enumerate() {
                    let i = d.expect("periodic");
                    let gm = mv.grad(q, l);
                    for (j, f) in feat.iter().enumerate() {
                        t.add(i, idx[j], mv.weights[q] * gm.dot(&f.gap));
                    }
                }
            }
        }
        t.build()
    }

    /// Frozen-control system `K x = r` for a control index per quadrature
    /// point (`policy[e * nq + q]`).
    pub fn assemble_policy_system(&self, policy: &[usize]) -> Result<(SparseMatrix, Vec<f64>)> {
        let ne = self.mesh().num_elements();
        if policy.len() != ne * self.nq {
            return Err(Error::DimensionMismatch(format!(
                "policy has {} entries, expected {}",
                policy.len(),
                ne * self.nq
            )));
        }
        if let Some(&bad) = policy.iter().find(|&&p| p >= self.n_controls()) {
            return Err(Error::InvalidArgument(format!(
                "control index {bad} out of range"
            )));
        }
        let (s1, s2) = (self.constants.sigma1, self.constants.sigma2);
        let locals: Vec<(Vec<usize>, Vec<f64>, Vec<f64>)> = (0..ne)
            .into_par_iter()
            .map(|e| {
                let idx = self.local_indices(e);
                let nl = idx.len();
                let mut k = vec![0.0; nl * nl];
                let mut r = vec![0.0; nl];
                let mut feat = Vec::with_capacity(nl);
                let mut op = Vec::with_capacity(nl);
                for q in 0..self.nq {
                    let s = self.scaled_at(e, q)[policy[e * self.nq + q]];
                    self.features(e, q, &s, &mut feat, &mut op);
                    let wq = self.w_values[e].weights[q];
                    for i in 0..nl {
                        let fi = feat[i];
                        r[i] += wq * s.f * fi.l;
                        for j in 0..nl {
                            let fj = feat[j];
                            k[i * nl + j] += wq
                                * (op[j] * fi.l + s1 * fj.rot * fi.rot + s2 * fj.gap.dot(&fi.gap));
                        }
                    }
                }
                (idx, k, r)
            })
            .collect();

        let lay = self.layout;
        let n = lay.total();
        let mut t =
            TripletBuilder::with_capacity(n, n, locals.iter().map(|l| l.1.len()).sum::<usize>());
        let mut rhs = vec![0.0; n];
        for (idx, k, r) in &locals {
            let nl = idx.len();
            for i in 0..nl {
                rhs[idx[i]] += r[i];
                for j in 0..nl {
                    t.push(idx[i], idx[j], k[i * nl + j]);
                }
            }
        }
        if let Some(b) = &self.coupling {
            t.add_block(b, lay.m0(), 0, 1.0);
            t.add_block_transposed(b, 0, lay.m0(), 1.0);
            for (k, &m) in self.mean_m.iter().enumerate() {
                t.push(lay.m0() + k, lay.mu0(), m);
                t.push(lay.mu0(), lay.m0() + k, m);
            }
        }
        Ok((t.build(), rhs))
    }

    /// Full residual vector of the semilinear system at `x` and the argmax
    /// control field.
    pub fn residual_vector(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
        let lay = self.layout;
        if x.len() != lay.total() {
            return Err(Error::DimensionMismatch(format!(
                "state has length {}, expected {}",
                x.len(),
                lay.total()
            )));
        }
        let (s1, s2) = (self.constants.sigma1, self.constants.sigma2);
        let ne = self.mesh().num_elements();
        let locals: Vec<(Vec<usize>, Vec<f64>, Vec<usize>)> = (0..ne)
            .into_par_iter()
            .map(|e| {
                let idx = self.local_indices(e);
                let mut r = vec![0.0; idx.len()];
                let mut feat = Vec::new();
                let mut op = Vec::new();
                let evals = self.eval_element(e, x);
                let mut pol = Vec::with_capacity(self.nq);
                for (q, ev) in evals.iter().enumerate() {
                    let s = self.scaled_at(e, q)[ev.policy];
                    self.features(e, q, &s, &mut feat, &mut op);
                    let (rot, gap) = (ev.rot(), ev.gap());
                    for (ri, fi) in r.iter_mut().zip(&feat) {
                        *ri += ev.weight
                            * (ev.f_gamma * fi.l + s1 * rot * fi.rot + s2 * gap.dot(&fi.gap));
                    }
                    pol.push(ev.policy);
                }
                (idx, r, pol)
            })
            .collect();
        let mut res = vec![0.0; lay.total()];
        let mut policy = Vec::with_capacity(ne * self.nq);
        for (idx, r, pol) in locals {
            for (i, v) in idx.iter().zip(r) {
                res[*i] += v;
            }
            policy.extend(pol);
        }
        if let Some(b) = &self.coupling {
            let xm = &x[lay.m0()..lay.m0() + lay.nm];
            for (i, v) in b.transpose_mul_vec(xm).into_iter().enumerate() {
                res[i] += v;
            }
            let bx = b.mul_vec(&x[..lay.nx()]);
            let mu = x[lay.mu0()];
            for k in 0..lay.nm {
                res[lay.m0() + k] = bx[k] + mu * self.mean_m[k];
            }
            res[lay.mu0()] = dot(&self.mean_m, xm);
        }
        Ok((res, policy))
    }

    /// Gram matrix of `|||.|||_lambda` on `X_h` with the first node of each
    /// `w` component pinned (the form only sees `w` up to constants).
    fn gram_solver(&self) -> Result<&LuSolver> {
        self.gram
            .get_or_init(|| {
                let lay = self.layout;
                let l = self.certificate.lambda;
                let kw = self.w_space.stiffness_matrix();
                let ku = self.u_space.stiffness_matrix();
                let mu = self.u_space.mass_matrix();
                let mut t = TripletBuilder::new(lay.nx(), lay.nx());
                for c in 0..2 {
                    let off = c * lay.nw;
                    for (i, j, v) in kw.iter() {
                        if i != 0 && j != 0 {
                            t.add(off + i, off + j, v);
                        }
                    }
                    t.add(off, off, 1.0);
                }
                t.add_block(&ku, lay.u0(), lay.u0(), 2.0 * l);
                t.add_block(&mu, lay.u0(), lay.u0(), l * l);
                t.build().lu().map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| Error::LinearSolve(e.clone()))
    }

    /// `|||(w, u)|||_lambda^2` of the `X_h` part of `x`.
    pub fn triple_norm_squared(&self, x: &[f64]) -> f64 {
        let lay = self.layout;
        let l = self.certificate.lambda;
        let kw = self.w_space.stiffness_matrix();
        let ku = self.u_space.stiffness_matrix();
        let mu = self.u_space.mass_matrix();
        let (w1, rest) = x.split_at(lay.nw);
        let (w2, rest) = rest.split_at(lay.nw);
        let u = &rest[..lay.nu];
        kw.quadratic(w1, w1)
            + kw.quadratic(w2, w2)
            + 2.0 * l * ku.quadratic(u, u)
            + l * l * mu.quadratic(u, u)
    }

    /// Dual norm of the `X_h` rows tested against pairs with zero-mean `w`,
    /// combined with the Euclidean norm of the multiplier rows.
    ///
    /// The `w` rows are first shifted along the mean weights so that they
    /// annihilate constants without changing their action on zero-mean
    /// fields; the pinned Gram solve then applies the pseudo-inverse.
    pub fn residual_norm(&self, res: &[f64]) -> Result<f64> {
        let lay = self.layout;
        let gram = self.gram_solver()?;
        let mut rhs = res[..lay.nx()].to_vec();
        let total_weight: f64 = self.mean_w.iter().sum();
        for c in 0..2 {
            let block = &mut rhs[c * lay.nw..(c + 1) * lay.nw];
            let t = block.iter().sum::<f64>() / total_weight;
            for (r, m) in block.iter_mut().zip(&self.mean_w) {
                *r -= t * m;
            }
            block[0] = 0.0;
        }
        let z = gram.solve(&rhs)?;
        let dual = dot(&z, &rhs).max(0.0);
        let rest: f64 = res[lay.nx()..].iter().map(|v| v * v).sum();
        Ok((dual + rest).sqrt())
    }

    /// Nonlinear residual of a state.
    pub fn nonlinear_residual(&self, state: &MixedState) -> Result<f64> {
        let (res, _) = self.residual_vector(&state.x)?;
        self.residual_norm(&res)
    }

    /// `a((w, u), (z, v))` for `X_h` coefficient vectors.
    pub fn semilinear_form(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        let nx = self.layout.nx();
        if x.len() < nx || z.len() < nx {
            return Err(Error::DimensionMismatch("X_h coefficient vector".into()));
        }
        let mut full = vec![0.0; self.layout.total()];
        full[..nx].copy_from_slice(&x[..nx]);
        let (res, _) = self.residual_vector(&full)?;
        Ok(dot(&res[..nx], &z[..nx]))
    }

    fn solve_policy(&self, policy: &[usize]) -> Result<Vec<f64>> {
        let (k, r) = self.assemble_policy_system(policy)?;
        let symbolic = match self.symbolic.get() {
            Some(s) => s,
            None => {
                let s = k.symbolic_lu()?;
                self.symbolic.get_or_init(|| s)
            }
        };
        k.lu_with_symbolic(symbolic)?.solve(&r)
    }

    /// Policy iteration from the smallest control.
    pub fn howard_solve(&self, tol: f64, max_iter: usize) -> Result<MixedState> {
        let policy = vec![0; self.mesh().num_elements() * self.nq];
        self.howard_solve_from(policy, tol, max_iter)
    }

    /// Policy iteration from a given control field. Each iteration solves the
    /// system frozen at the current argmax; steps that fail to reduce the
    /// residual are halved up to ten times.
    pub fn howard_solve_from(
        &self,
        initial_policy: Vec<usize>,
        tol: f64,
        max_iter: usize,
    ) -> Result<MixedState> {
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tolerance {tol} must be positive"
            )));
        }
        let mut x = self.solve_policy(&initial_policy)?;
        let mut iterations = 1;
        let (mut res, mut policy) = self.residual_vector(&x)?;
        let mut norm = self.residual_norm(&res)?;
        let mut history = vec![norm];
        // a full step whose policy reproduces itself solves the discrete
        // problem up to linear-solve rounding
        let mut stable = policy == initial_policy;
        while norm > tol && !stable {
            if iterations >= max_iter.max(1) {
                return Err(Error::NoConvergence {
                    iterations,
                    residual: norm,
                });
            }
            let x_new = self.solve_policy(&policy)?;
            iterations += 1;
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let trial: Vec<f64> = x.iter().zip(&x_new).map(|(a, b)| a + t * (b - a)).collect();
                let (r, p) = self.residual_vector(&trial)?;
                let n = self.residual_norm(&r)?;
                if n < norm || (t == 1.0 && p == policy) {
                    accepted = Some((trial, r, p, n, t));
                    break;
                }
                t *= 0.5;
            }
            let Some((trial, r, p, n, t)) = accepted else {
                return Err(Error::NoConvergence {
                    iterations,
                    residual: norm,
                });
            };
            stable = t == 1.0 && p == policy;
            x = trial;
            res = r;
            policy = p;
            norm = n;
            history.push(norm);
        }
        let _ = res;
        Ok(self.state_from(x, policy, iterations, history))
    }

    fn state_from(
        &self,
        x: Vec<f64>,
        policy: Vec<usize>,
        iterations: usize,
        history: Vec<f64>,
    ) -> MixedState {
        let lay = self.layout;
        let w = FeFunction::new(self.w_space.clone(), x[..2 * lay.nw].to_vec()).expect("layout");
        let u =
            FeFunction::new(self.u_space.clone(), x[lay.u0()..lay.m0()].to_vec()).expect("layout");
        let m = self
            .m_space
            .as_ref()
            .map(|s| FeFunction::new(s.clone(), x[lay.m0()..lay.mu0()].to_vec()).expect("layout"));
        let controls = self.family.controls().values();
        MixedState {
            w,
            u,
            m,
            policy: policy.iter().map(|&p| controls[p]).collect(),
            policy_index: policy,
            iterations,
            residual_history: history,
            x,
        }
    }

    /// Packs `X_h` coefficients (`[w_1, w_2, u]`) into a full state vector
    /// with zero multipliers.
    pub fn state_vector(&self, w: &FeFunction, u: &FeFunction) -> Result<Vec<f64>> {
        if w.coeffs().len() != 2 * self.layout.nw || u.coeffs().len() != self.layout.nu {
            return Err(Error::DimensionMismatch(
                "pair does not match the problem spaces".into(),
            ));
        }
        let mut x = vec![0.0; self.layout.total()];
        x[..2 * self.layout.nw].copy_from_slice(w.coeffs());
        x[self.layout.u0()..self.layout.m0()].copy_from_slice(u.coeffs());
        Ok(x)
    }

    /// `|||(w - w_h, u - u_h)|||_lambda` against an exact solution given as
    /// `y -> (u, grad u, D^2 u)`, with `w = grad u`.
    pub fn error_norm(
        &self,
        state: &MixedState,
        exact: impl Fn(&Point2<f64>) -> (f64, Vector2<f64>, Matrix2<f64>) + Sync,
    ) -> f64 {
        let l = self.certificate.lambda;
        let rule = TriangleRule::with_degree(8);
        let ne = self.mesh().num_elements();
        let sum: f64 = (0..ne)
            .into_par_iter()
            .map(|e| {
                let wv = self.w_space.element_values(e, &rule);
                let uv = self.u_space.element_values(e, &rule);
                let ws = state.w.eval_element(e, &wv);
                let us = state.u.eval_element(e, &uv);
                ws.iter()
                    .zip(&us)
                    .map(|(qw, qu)| {
                        let (u, g, hess) = exact(&qw.point);
                        qw.weight
                            * ((hess - qw.jacobian).norm_squared()
                                + 2.0 * l * (g - qu.gradient()).norm_squared()
                                + l * l * (u - qu.value[0]).powi(2))
                    })
                    .sum::<f64>()
            })
            .sum();
        sum.sqrt()
    }
}

/// Discrete solution together with solver diagnostics.
#[derive(Debug, Clone)]
pub struct MixedState {
    pub w: FeFunction,
    pub u: FeFunction,
    pub m: Option<FeFunction>,
    /// Maximising control per `(element, quadrature point)`.
    pub policy: Vec<f64>,
    pub policy_index: Vec<usize>,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    x: Vec<f64>,
}

impl MixedState {
    /// Full unknown vector including multipliers.
    pub fn vector(&self) -> &[f64] {
        &self.x
    }

    pub fn final_residual(&self) -> f64 {
        *self.residual_history.last().expect("at least one residual")
    }

    /// Diagnostics as one JSON object.
    pub fn diagnostics(&self) -> serde_json::Value {
        serde_json::json!({
            "iterations": self.iterations,
            "residual_history": self.residual_history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{select_lambda, Coefficients, ControlGrid, SampleGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn laplace_problem(n: usize, multiplier: MultiplierSpace) -> MixedProblem {
        let fam = CoefficientFamily::by_name("laplace").unwrap();
        let cert = CordesCertificate::given(1.0, 0.5).unwrap();
        let config = MixedConfig {
            multiplier,
            ..MixedConfig::default()
        };
        MixedProblem::new(fam, cert, n, config).unwrap()
    }

    fn random_pair(p: &MixedProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let lay = p.layout;
        let mut x: Vec<f64> = (0..lay.nx()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in 0..2 {
            let s = &mut x[c * lay.nw..(c + 1) * lay.nw];
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            s.iter_mut().for_each(|v| *v -= mean);
        }
        x
    }

    #[test]
    fn constants_ranges() {
        for delta in [0.05, 0.46, 0.9] {
            let c = StabilityConstants::new(0.7, delta);
            assert!(c.sigma1 > 0.5 && c.sigma1 < 1.0);
            assert!(c.sigma2 > 0.0);
            assert!(c.c_m > 0.0 && c.c_l > c.c_m);
            assert!(c.c_b >= c.c_b_inf);
        }
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        for m in [MultiplierSpace::Trivial, MultiplierSpace::ZeroMean] {
            let p = laplace_problem(4, m);
            let s = p.howard_solve(1e-12, 5).unwrap();
            assert!(s.x.iter().all(|v| v.abs() < 1e-13));
            assert_eq!(s.iterations, 1);
        }
    }

    #[test]
    fn trivial_multiplier_has_only_mean_rows() {
        let p = laplace_problem(3, MultiplierSpace::Trivial);
        assert_eq!(p.dim(), p.dim_x());
        let q = laplace_problem(3, MultiplierSpace::ZeroMean);
        assert_eq!(q.dim(), q.dim_x() + q.layout.nm + 1);
    }

    #[test]
    fn policy_matrix_is_residual_derivative() {
        let fam = CoefficientFamily::by_name("fo-benchmark").unwrap();
        let cert = select_lambda(&fam, &SampleGrid::new(16)).unwrap();
        let p = MixedProblem::new(fam, cert, 4, MixedConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..p.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (r0, policy) = p.residual_vector(&x).unwrap();
        let (k, rhs) = p.assemble_policy_system(&policy).unwrap();
        let kx = k.mul_vec(&x);
        for i in 0..p.dim() {
            assert!((kx[i] - rhs[i] - r0[i]).abs() < 1e-10 * (1.0 + r0[i].abs()));
        }
        // finite-difference directional derivative
        let d: Vec<f64> = (0..p.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-7;
        let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + h * b).collect();
        let (rp, pp) = p.residual_vector(&xp).unwrap();
        if pp == policy {
            let kd = k.mul_vec(&d);
            let fd: Vec<f64> = rp.iter().zip(&r0).map(|(a, b)| (a - b) / h).collect();
            let err = fd
                .iter()
                .zip(&kd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = kd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err <= 1e-6 * scale, "{err} vs {scale}");
        }
        assert!(p.assemble_policy_system(&policy[1..]).is_err());
    }

    #[test]
    fn singleton_controls_converge_after_one_update() {
        let fam = CoefficientFamily::by_name("manufactured").unwrap();
        let cert = CordesCertificate::given(1.0, 0.999).unwrap();
        let p = MixedProblem::new(fam, cert, 8, MixedConfig::default()).unwrap();
        let s = p.howard_solve(1e-9, 5).unwrap();
        assert_eq!(s.iterations, 1);
        assert!(p.nonlinear_residual(&s).unwrap() <= 1e-9);
    }

    #[test]
    fn benchmark_converges_monotonically() {
        let fam = CoefficientFamily::by_name("fo-benchmark").unwrap();
        let cert = select_lambda(&fam, &SampleGrid::default()).unwrap();
        let p = MixedProblem::new(fam, cert, 16, MixedConfig::default()).unwrap();
        let s = p.howard_solve(1e-10, 20).unwrap();
        assert!(s.iterations <= 20);
        for pair in s.residual_history.windows(2) {
            assert!(pair[1] < pair[0]);
        }
        assert!(s.final_residual() <= 1e-10);
    }

    #[test]
    fn solution_is_independent_of_initial_policy() {
        let fam = CoefficientFamily::by_name("fo-benchmark").unwrap();
        let cert = select_lambda(&fam, &SampleGrid::new(32)).unwrap();
        let p = MixedProblem::new(fam, cert, 8, MixedConfig::default()).unwrap();
        let tol = 1e-10;
        let a = p.howard_solve(tol, 30).unwrap();
        let ones = vec![1; p.mesh().num_elements() * p.quad_points()];
        let b = p.howard_solve_from(ones, tol, 30).unwrap();
        let diff: Vec<f64> = a.x.iter().zip(&b.x).map(|(x, y)| x - y).collect();
        assert!(p.triple_norm_squared(&diff).sqrt() <= 10.0 * tol / p.constants().c_m);
    }

    #[test]
    fn nontrivial_multiplier_matches_trivial() {
        let fam = CoefficientFamily::by_name("fo-benchmark").unwrap();
        let cert = select_lambda(&fam, &SampleGrid::new(32)).unwrap();
        let a = MixedProblem::new(fam.clone(), cert.clone(), 6, MixedConfig::default())
            .unwrap()
            .howard_solve(1e-10, 30)
            .unwrap();
        let config = MixedConfig {
            multiplier: MultiplierSpace::ZeroMean,
            ..MixedConfig::default()
        };
        let pm = MixedProblem::new(fam, cert, 6, config).unwrap();
        let b = pm.howard_solve(1e-10, 30).unwrap();
        // both are valid discretisations; they agree on the mean of u closely
        let wa = a.u.space().basis_integrals();
        let ma = dot(&wa, a.u.coeffs());
        let mb = dot(&wa, b.u.coeffs());
        assert!((ma - mb).abs() < 1e-2 * ma.abs());
        assert!(b.m.is_some());
    }

    #[test]
    fn manufactured_error_decreases() {
        let fam = CoefficientFamily::by_name("manufactured").unwrap();
        let cert = select_lambda(&fam, &SampleGrid::new(8)).unwrap();
        let exact = |y: &Point2<f64>| {
            let (c1, s1) = ((2.0 * PI * y.x).cos(), (2.0 * PI * y.x).sin());
            let (c2, s2) = ((2.0 * PI * y.y).cos(), (2.0 * PI * y.y).sin());
            let k = 2.0 * PI;
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
        };
        let errs: Vec<f64> = [8, 16]
            .iter()
            .map(|&n| {
                let p = MixedProblem::new(fam.clone(), cert.clone(), n, MixedConfig::default())
                    .unwrap();
                let s = p.howard_solve(1e-9, 5).unwrap();
                p.error_norm(&s, exact)
            })
            .collect();
        let rate = (errs[0] / errs[1]).log2();
        assert!(rate > 0.8, "{errs:?}");
    }

    #[test]
    fn monotone_and_lipschitz_on_random_pairs() {
        let fam = CoefficientFamily::new(
            "two-control",
            ControlGrid::new(vec![0.0, 1.0]).unwrap(),
            |_, y, a| {
                let s = (2.0 * PI * y.x).sin();
                Coefficients {
                    a: Matrix2::new(1.0 + a + 0.3 * s, 0.2 * s, 0.2 * s, 1.5),
                    b: Vector2::new(0.3 * a, -0.1),
                    c: 1.0,
                    f: s,
                }
            },
        );
        let cert = select_lambda(&fam, &SampleGrid::new(32)).unwrap();
        let p = MixedProblem::new(fam, cert, 4, MixedConfig::default()).unwrap();
        let k = *p.constants();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let x = random_pair(&p, &mut rng);
            let y = random_pair(&p, &mut rng);
            let z = random_pair(&p, &mut rng);
            let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            let nd = p.triple_norm_squared(&d);
            let mono = p.semilinear_form(&x, &d).unwrap() - p.semilinear_form(&y, &d).unwrap();
            assert!(mono - k.c_m * nd >= -1e-10 * (1.0 + nd));
            let lip =
                (p.semilinear_form(&x, &z).unwrap() - p.semilinear_form(&y, &z).unwrap()).abs();
            let nz = p.triple_norm_squared(&z);
            assert!(k.c_l * (nd * nz).sqrt() - lip >= -1e-10 * (1.0 + nd));
        }
    }
}
