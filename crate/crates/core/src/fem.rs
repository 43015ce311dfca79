//! Lagrange `P1`/`P2` spaces on the structured meshes, with periodic
//! identification, quadrature-point evaluation and the basic assembly
//! kernels.
//!
//! Global nodes live on a lattice of resolution `r = degree * N`: lattice
//! point `(a, b)` sits at `(a/r, b/r)`. For periodic meshes `(a, b)` is
//! reduced modulo `r`, which merges opposite faces and all four corners.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{Matrix2, Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, MeshFlavor};
use crate::quadrature::TriangleRule;
use crate::sparse::{LuSolver, SparseMatrix, TripletBuilder};

/// Default quadrature degree for nonlinear terms.
pub const DEFAULT_QUAD_DEGREE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    None,
    /// Zero mean per component; enforced by the solvers with a multiplier.
    ZeroMean,
    /// Homogeneous Dirichlet data; boundary nodes carry no degree of freedom.
    Dirichlet,
}

#[derive(Debug)]
pub struct FunctionSpace {
    mesh: Arc<Mesh>,
    degree: usize,
    components: usize,
    constraint: Constraint,
    local_count: usize,
    dof_map: Vec<Option<usize>>,
    n_dofs: usize,
    node_points: Vec<Point2<f64>>,
}

impl FunctionSpace {
    pub fn new(
        mesh: Arc<Mesh>,
        degree: usize,
        components: usize,
        constraint: Constraint,
    ) -> Result<Arc<Self>> {
        if !(1..=2).contains(&degree) {
            return Err(Error::UnsupportedDegree(degree));
        }
        if !(1..=2).contains(&components) {
            return Err(Error::InvalidArgument(format!(
                "{components} components requested; only scalar and 2-vector fields exist"
            )));
        }
        match (mesh.flavor(), constraint) {
            (MeshFlavor::Periodic, Constraint::Dirichlet) => {
                return Err(Error::InvalidArgument(
                    "Dirichlet elimination needs a dirichlet-flavor mesh".into(),
                ))
            }
            (MeshFlavor::Dirichlet, Constraint::ZeroMean) => {
                return Err(Error::InvalidArgument(
                    "zero-mean spaces are periodic".into(),
                ))
            }
            _ => {}
        }

        let n = mesh.n();
        let r = degree * n;
        let index_of = |a: usize, b: usize| -> Option<usize> {
            match (mesh.flavor(), constraint) {
                (MeshFlavor::Periodic, _) => Some((b % r) * r + (a % r)),
                (MeshFlavor::Dirichlet, Constraint::Dirichlet) => {
                    if a == 0 || b == 0 || a == r || b == r {
                        None
                    } else {
                        Some((b - 1) * (r - 1) + (a - 1))
                    }
                }
                (MeshFlavor::Dirichlet, _) => Some(b * (r + 1) + a),
            }
        };
        let n_dofs = match (mesh.flavor(), constraint) {
            (MeshFlavor::Periodic, _) => r * r,
            (MeshFlavor::Dirichlet, Constraint::Dirichlet) => (r - 1) * (r - 1),
            (MeshFlavor::Dirichlet, _) => (r + 1) * (r + 1),
        };

        let local_count = local_node_count(degree);
        let mut dof_map = Vec::with_capacity(mesh.num_elements() * local_count);
        let mut node_points = vec![Point2::origin(); n_dofs];
        for tri in mesh.elements() {
            let lattice: Vec<(usize, usize)> = tri
                .iter()
                .map(|&v| {
                    let (i, j) = mesh.vertex_grid(v);
                    (degree * i, degree * j)
                })
                .collect();
            let mut nodes = lattice.clone();
            if degree == 2 {
                for (p, q) in EDGES {
                    let (a0, b0) = lattice[p];
                    let (a1, b1) = lattice[q];
                    nodes.push(((a0 + a1) / 2, (b0 + b1) / 2));
                }
            }
            for (a, b) in nodes {
                let idx = index_of(a, b);
                if let Some(i) = idx {
                    node_points[i] = Point2::new(a as f64 / r as f64, b as f64 / r as f64);
                }
                dof_map.push(idx);
            }
        }

        Ok(Arc::new(Self {
            mesh,
            degree,
            components,
            constraint,
            local_count,
            dof_map,
            n_dofs,
            node_points,
        }))
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn constraint(&self) -> Constraint {
        self.constraint
    }

    /// Degrees of freedom per component.
    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    /// Length of a coefficient vector (`n_dofs * components`).
    pub fn len(&self) -> usize {
        self.n_dofs * self.components
    }

    pub fn is_empty(&self) -> bool {
        self.n_dofs == 0
    }

    pub fn local_count(&self) -> usize {
        self.local_count
    }

    /// Global index (per component) of each local node of element `e`;
    /// `None` for eliminated boundary nodes.
    pub fn element_dofs(&self, e: usize) -> &[Option<usize>] {
        &self.dof_map[e * self.local_count..(e + 1) * self.local_count]
    }

    /// Coordinates of the node carrying each global degree of freedom.
    pub fn node_points(&self) -> &[Point2<f64>] {
        &self.node_points
    }

    pub fn same_mesh(&self, other: &FunctionSpace) -> bool {
        Arc::ptr_eq(&self.mesh, &other.mesh)
            || (self.mesh.n() == other.mesh.n() && self.mesh.flavor() == other.mesh.flavor())
    }

    /// Shape functions and gradients of element `e` at the rule's points.
    pub fn element_values(&self, e: usize, rule: &TriangleRule) -> ElementValues {
        let geo = self.mesh.geometry(e);
        let tri = self.mesh.elements()[e];
        let nq = rule.len();
        let nl = self.local_count;
        let mut values = vec![0.0; nq * nl];
        let mut grads = vec![Vector2::zeros(); nq * nl];
        let mut points = Vec::with_capacity(nq);
        let mut weights = Vec::with_capacity(nq);
        for (q, (bary, w)) in rule.points().iter().zip(rule.weights()).enumerate() {
            let p = (0..3).fold(Vector2::zeros(), |acc, k| {
                acc + self.mesh.vertices()[tri[k]].coords * bary[k]
            });
            points.push(Point2::from(p));
            weights.push(w * geo.area);
            shape_functions(
                self.degree,
                bary,
                &geo.grad_bary,
                &mut values[q * nl..(q + 1) * nl],
                &mut grads[q * nl..(q + 1) * nl],
            );
        }
        ElementValues {
            local_count: nl,
            points,
            weights,
            values,
            grads,
        }
    }

    /// Integrals of the scalar basis functions; `mean = weights . coeffs`.
    pub fn basis_integrals(&self) -> Vec<f64> {
        let rule = TriangleRule::with_degree(self.degree);
        let mut out = vec![0.0; self.n_dofs];
        for e in 0..self.mesh.num_elements() {
            let ev = self.element_values(e, &rule);
            for q in 0..ev.len() {
                for (l, dof) in self.element_dofs(e).iter().enumerate() {
                    if let Some(i) = dof {
                        out[*i] += ev.weights[q] * ev.value(q, l);
                    }
                }
            }
        }
        out
    }

    /// Scalar mass matrix (`n_dofs x n_dofs`).
    pub fn mass_matrix(&self) -> SparseMatrix {
        self.assemble_scalar(|_, vi, vj, _, _| vi * vj)
    }

    /// Scalar stiffness matrix `int grad(phi_i) . grad(phi_j)`.
    pub fn stiffness_matrix(&self) -> SparseMatrix {
        self.assemble_scalar(|_, _, _, gi, gj| gi.dot(gj))
    }

    /// Bilinear-form assembly for a scalar integrand evaluated per
    /// quadrature point from `(point, phi_i, phi_j, grad phi_i, grad phi_j)`.
    pub fn assemble_scalar<F>(&self, kernel: F) -> SparseMatrix
    where
        F: Fn(&Point2<f64>, f64, f64, &Vector2<f64>, &Vector2<f64>) -> f64,
    {
        let rule = TriangleRule::with_degree(2 * self.degree);
        let nl = self.local_count;
        let mut t = TripletBuilder::with_capacity(
            self.n_dofs,
            self.n_dofs,
            self.mesh.num_elements() * nl * nl,
        );
        for e in 0..self.mesh.num_elements() {
            let ev = self.element_values(e, &rule);
            let dofs = self.element_dofs(e);
            for (li, di) in dofs.iter().enumerate() {
                let Some(i) = di else { continue };
                for (lj, dj) in dofs.iter().enumerate() {
                    let Some(j) = dj else { continue };
                    let mut v = 0.0;
                    for q in 0..ev.len() {
                        v += ev.weights[q]
                            * kernel(
                                &ev.points[q],
                                ev.value(q, li),
                                ev.value(q, lj),
                                &ev.grad(q, li),
                                &ev.grad(q, lj),
                            );
                    }
                    t.add(*i, *j, v);
                }
            }
        }
        t.build()
    }
}

/// Local nodes per element for a degree.
fn local_node_count(degree: usize) -> usize {
    match degree {
        1 => 3,
        _ => 6,
    }
}

/// Local edge `k` of a `P2` element joins these vertices; nodes 3..6.
const EDGES: [(usize, usize); 3] = [(1, 2), (2, 0), (0, 1)];

fn shape_functions(
    degree: usize,
    bary: &[f64; 3],
    grad_bary: &[Vector2<f64>; 3],
    values: &mut [f64],
    grads: &mut [Vector2<f64>],
) {
    match degree {
        1 => {
            values[..3].copy_from_slice(&bary[..3]);
            grads[..3].copy_from_slice(&grad_bary[..3]);
        }
        _ => {
            for k in 0..3 {
                values[k] = bary[k] * (2.0 * bary[k] - 1.0);
                grads[k] = grad_bary[k] * (4.0 * bary[k] - 1.0);
            }
            for (m, (p, q)) in EDGES.iter().enumerate() {
                values[3 + m] = 4.0 * bary[*p] * bary[*q];
                grads[3 + m] = (grad_bary[*q] * bary[*p] + grad_bary[*p] * bary[*q]) * 4.0;
            }
        }
    }
}

/// Shape data on one element at the points of a quadrature rule.
#[derive(Debug, Clone)]
pub struct ElementValues {
    local_count: usize,
    pub points: Vec<Point2<f64>>,
    /// Physical weights (already scaled by the element area).
    pub weights: Vec<f64>,
    values: Vec<f64>,
    grads: Vec<Vector2<f64>>,
}

impl ElementValues {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn value(&self, q: usize, l: usize) -> f64 {
        self.values[q * self.local_count + l]
    }

    #[inline]
    pub fn grad(&self, q: usize, l: usize) -> Vector2<f64> {
        self.grads[q * self.local_count + l]
    }
}

/// Values and derivatives of a finite element function at one quadrature
/// point. Row `c` of `jacobian` is the gradient of component `c`; scalar
/// functions only fill row 0.
#[derive(Debug, Clone, Copy)]
pub struct QpValue {
    pub point: Point2<f64>,
    pub weight: f64,
    pub value: Vector2<f64>,
    pub jacobian: Matrix2<f64>,
}

impl QpValue {
    pub fn gradient(&self) -> Vector2<f64> {
        Vector2::new(self.jacobian[(0, 0)], self.jacobian[(0, 1)])
    }

    pub fn divergence(&self) -> f64 {
        self.jacobian[(0, 0)] + self.jacobian[(1, 1)]
    }

    /// `d_2 w_1 - d_1 w_2`
    pub fn rot(&self) -> f64 {
        self.jacobian[(0, 1)] - self.jacobian[(1, 0)]
    }
}

#[derive(Debug, Clone)]
pub struct FeFunction {
    space: Arc<FunctionSpace>,
    coeffs: Vec<f64>,
}

impl FeFunction {
    /// Coefficients are stored component-major: `coeffs[c * n_dofs + i]`.
    pub fn new(space: Arc<FunctionSpace>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != space.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for a space of length {}",
                coeffs.len(),
                space.len()
            )));
        }
        Ok(Self { space, coeffs })
    }

    pub fn zeros(space: Arc<FunctionSpace>) -> Self {
        let coeffs = vec![0.0; space.len()];
        Self { space, coeffs }
    }

    pub fn space(&self) -> &Arc<FunctionSpace> {
        &self.space
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.space.n_dofs;
        &self.coeffs[c * n..(c + 1) * n]
    }

    fn local_coeff(&self, dof: Option<usize>, c: usize) -> f64 {
        dof.map_or(0.0, |i| self.coeffs[c * self.space.n_dofs + i])
    }

    /// Value and Jacobian on element `e` at each point of `ev`.
    pub fn eval_element(&self, e: usize, ev: &ElementValues) -> Vec<QpValue> {
        let dofs = self.space.element_dofs(e);
        let nc = self.space.components;
        (0..ev.len())
            .map(|q| {
                let mut value = Vector2::zeros();
                let mut jacobian = Matrix2::zeros();
                for (l, dof) in dofs.iter().enumerate() {
                    let phi = ev.value(q, l);
                    let g = ev.grad(q, l);
                    for c in 0..nc {
                        let a = self.local_coeff(*dof, c);
                        value[c] += a * phi;
                        jacobian[(c, 0)] += a * g.x;
                        jacobian[(c, 1)] += a * g.y;
                    }
                }
                QpValue {
                    point: ev.points[q],
                    weight: ev.weights[q],
                    value,
                    jacobian,
                }
            })
            .collect()
    }

    /// Values and derivatives at the points of a degree-`quad_degree` rule on
    /// every element.
    pub fn eval_at_qp(&self, quad_degree: usize) -> Result<Vec<Vec<QpValue>>> {
        if quad_degree == 0 {
            return Err(Error::InvalidArgument(
                "quadrature degree must be >= 1".into(),
            ));
        }
        let rule = TriangleRule::with_degree(quad_degree);
        Ok((0..self.space.mesh.num_elements())
            .map(|e| {
                let ev = self.space.element_values(e, &rule);
                self.eval_element(e, &ev)
            })
            .collect())
    }

    /// Point evaluation (value and Jacobian) at an arbitrary point.
    pub fn eval_point(&self, p: &Point2<f64>) -> QpValue {
        let mesh = &self.space.mesh;
        let (e, bary) = mesh.locate(p);
        let geo = mesh.geometry(e);
        let nl = self.space.local_count;
        let mut values = [0.0; 6];
        let mut grads = [Vector2::zeros(); 6];
        shape_functions(
            self.space.degree,
            &bary,
            &geo.grad_bary,
            &mut values[..nl],
            &mut grads[..nl],
        );
        let ev = ElementValues {
            local_count: nl,
            points: vec![*p],
            weights: vec![0.0],
            values: values[..nl].to_vec(),
            grads: grads[..nl].to_vec(),
        };
        self.eval_element(e, &ev)[0]
    }

    /// Mean over the unit square, per component.
    pub fn integral(&self) -> Vector2<f64> {
        let w = self.space.basis_integrals();
        let mut out = Vector2::zeros();
        for c in 0..self.space.components {
            out[c] = crate::sparse::dot(&w, self.component(c));
        }
        out
    }

    /// `||f||_{L^2}` (all components).
    pub fn l2_norm(&self) -> f64 {
        let rule = TriangleRule::with_degree(2 * self.space.degree);
        let mut s = 0.0;
        for e in 0..self.space.mesh.num_elements() {
            let ev = self.space.element_values(e, &rule);
            for qv in self.eval_element(e, &ev) {
                s += qv.weight * qv.value.norm_squared();
            }
        }
        s.sqrt()
    }

    /// Writes `node,x,y,value...` rows, one per degree of freedom.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        match self.space.components {
            1 => writeln!(out, "node,x,y,value")?,
            _ => writeln!(out, "node,x,y,value_1,value_2")?,
        }
        for (i, p) in self.space.node_points.iter().enumerate() {
            write!(out, "{i},{},{}", p.x, p.y)?;
            for c in 0..self.space.components {
                write!(out, ",{}", self.coeffs[c * self.space.n_dofs + i])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Nodal interpolant of a scalar function (applied to every component).
pub fn interpolate(space: &Arc<FunctionSpace>, g: impl Fn(&Point2<f64>) -> f64) -> FeFunction {
    interpolate_vector(space, |p| {
        let v = g(p);
        Vector2::new(v, v)
    })
}

/// Nodal interpolant of a vector field; scalar spaces take the first entry.
pub fn interpolate_vector(
    space: &Arc<FunctionSpace>,
    g: impl Fn(&Point2<f64>) -> Vector2<f64>,
) -> FeFunction {
    let n = space.n_dofs;
    let mut coeffs = vec![0.0; space.len()];
    for (i, p) in space.node_points.iter().enumerate() {
        let v = g(p);
        for c in 0..space.components {
            coeffs[c * n + i] = v[c];
        }
    }
    FeFunction {
        space: space.clone(),
        coeffs,
    }
}

/// `|||(w, u)|||_lambda^2 = ||Dw||^2 + 2 lambda ||grad u||^2 + lambda^2 ||u||^2`.
pub fn triple_norm(w: &FeFunction, u: &FeFunction, lambda: f64) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lambda = {lambda} must be positive"
        )));
    }
    if !w.space.same_mesh(&u.space) {
        return Err(Error::DimensionMismatch(
            "w and u live on different meshes".into(),
        ));
    }
    let degree = 2 * w.space.degree.max(u.space.degree);
    let rule = TriangleRule::with_degree(degree);
    let mut s = 0.0;
    for e in 0..w.space.mesh.num_elements() {
        let ew = w.space.element_values(e, &rule);
        let eu = u.space.element_values(e, &rule);
        for (qw, qu) in w.eval_element(e, &ew).iter().zip(u.eval_element(e, &eu)) {
            s += qw.weight
                * (qw.jacobian.norm_squared()
                    + 2.0 * lambda * qu.gradient().norm_squared()
                    + lambda * lambda * qu.value[0] * qu.value[0]);
        }
    }
    Ok(s.sqrt())
}

/// `L^2` projection of gradients of scalar functions from one space onto a
/// vector space on the same mesh, with the mass matrix factorised once.
pub struct GradientProjector {
    target: Arc<FunctionSpace>,
    source: Arc<FunctionSpace>,
    mass: LuSolver,
    coupling: [SparseMatrix; 2],
}

impl GradientProjector {
    pub fn new(target: Arc<FunctionSpace>, source: Arc<FunctionSpace>) -> Result<Self> {
        if target.components != 2 || source.components != 1 {
            return Err(Error::DimensionMismatch(
                "gradient projection maps scalar fields to 2-vector fields".into(),
            ));
        }
        if !target.same_mesh(&source) {
            return Err(Error::DimensionMismatch(
                "spaces live on different meshes".into(),
            ));
        }
        let mass = target.mass_matrix();
        let mass = mass.lu()?;
        let rule = TriangleRule::with_degree(target.degree + source.degree);
        let mut t0 = TripletBuilder::new(target.n_dofs, source.n_dofs);
        let mut t1 = TripletBuilder::new(target.n_dofs, source.n_dofs);
        for e in 0..target.mesh.num_elements() {
            let et = target.element_values(e, &rule);
            let es = source.element_values(e, &rule);
            for (li, di) in target.element_dofs(e).iter().enumerate() {
                let Some(i) = di else { continue };
                for (lk, dk) in source.element_dofs(e).iter().enumerate() {
                    let Some(k) = dk else { continue };
                    let mut v = Vector2::zeros();
                    for q in 0..et.len() {
                        v += es.grad(q, lk) * (et.weights[q] * et.value(q, li));
                    }
                    t0.add(*i, *k, v.x);
                    t1.add(*i, *k, v.y);
                }
            }
        }
        Ok(Self {
            target,
            source,
            mass,
            coupling: [t0.build(), t1.build()],
        })
    }

    pub fn target(&self) -> &Arc<FunctionSpace> {
        &self.target
    }

    pub fn source(&self) -> &Arc<FunctionSpace> {
        &self.source
    }

    /// `int d_c phi_k phi_i` for component `c`.
    pub fn coupling(&self, c: usize) -> &SparseMatrix {
        &self.coupling[c]
    }

    /// Projects raw source coefficients; returns target coefficients.
    pub fn project_coeffs(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.target.len());
        for c in 0..2 {
            let rhs = self.coupling[c].mul_vec(u);
            out.extend(self.mass.solve(&rhs)?);
        }
        Ok(out)
    }

    /// Solves with the (scalar) target mass matrix.
    pub fn mass_solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.mass.solve(rhs)
    }

    pub fn project(&self, u: &FeFunction) -> Result<FeFunction> {
        if u.space.len() != self.source.len() {
            return Err(Error::DimensionMismatch("source function space".into()));
        }
        FeFunction::new(self.target.clone(), self.project_coeffs(&u.coeffs)?)
    }
}

/// Solves `int w . v = int grad(u) . v` for all `v` in `target`.
pub fn l2_project(target: &Arc<FunctionSpace>, source: &FeFunction) -> Result<FeFunction> {
    GradientProjector::new(target.clone(), source.space.clone())?.project(source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::MeshFlavor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn mesh(n: usize, flavor: MeshFlavor) -> Arc<Mesh> {
        Arc::new(Mesh::uniform(n, flavor).unwrap())
    }

    #[test]
    fn periodic_dof_counts() {
        let s = FunctionSpace::new(mesh(1, MeshFlavor::Periodic), 1, 1, Constraint::None).unwrap();
        assert_eq!(s.n_dofs(), 1);
        assert!(s
            .element_dofs(0)
            .iter()
            .chain(s.element_dofs(1))
            .all(|d| *d == Some(0)));
        let s = FunctionSpace::new(mesh(2, MeshFlavor::Periodic), 1, 1, Constraint::None).unwrap();
        assert_eq!(s.n_dofs(), 4);
        let s = FunctionSpace::new(mesh(2, MeshFlavor::Periodic), 2, 2, Constraint::None).unwrap();
        assert_eq!(s.n_dofs(), 16);
        assert_eq!(s.len(), 32);
    }

    #[test]
    fn dirichlet_elimination() {
        let s = FunctionSpace::new(mesh(2, MeshFlavor::Dirichlet), 1, 1, Constraint::Dirichlet)
            .unwrap();
        assert_eq!(s.n_dofs(), 1);
        assert!((s.node_points()[0] - Point2::new(0.5, 0.5)).norm() < 1e-15);
        let s = FunctionSpace::new(mesh(2, MeshFlavor::Dirichlet), 1, 1, Constraint::None).unwrap();
        assert_eq!(s.n_dofs(), 9);
    }

    #[test]
    fn dof_map_is_surjective() {
        for (n, deg) in [(3, 1), (3, 2), (4, 2)] {
            let s = FunctionSpace::new(mesh(n, MeshFlavor::Periodic), deg, 1, Constraint::None)
                .unwrap();
            let mut hit = vec![false; s.n_dofs()];
            for e in 0..s.mesh().num_elements() {
                for d in s.element_dofs(e) {
                    hit[d.unwrap()] = true;
                }
            }
            assert!(hit.iter().all(|&h| h));
        }
    }

    #[test]
    fn rejects_bad_degree() {
        assert!(matches!(
            FunctionSpace::new(mesh(2, MeshFlavor::Periodic), 3, 1, Constraint::None),
            Err(Error::UnsupportedDegree(3))
        ));
    }

    #[test]
    fn interpolation_examples() {
        let m = mesh(4, MeshFlavor::Periodic);
        let s = FunctionSpace::new(m.clone(), 1, 1, Constraint::None).unwrap();
        let f = interpolate(&s, |_| 3.0);
        assert!(f.coeffs().iter().all(|&c| c == 3.0));
        let g = interpolate(&s, |p| (2.0 * PI * p.x).cos());
        for (i, p) in s.node_points().iter().enumerate() {
            let k = (p.x * 4.0).round();
            assert!((g.coeffs()[i] - (2.0 * PI * k / 4.0).cos()).abs() < 1e-14);
        }
        // re-interpolating a member reproduces its coefficients
        let again = interpolate(&s, |p| g.eval_point(p).value[0]);
        for (a, b) in again.coeffs().iter().zip(g.coeffs()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn p2_reproduces_quadratics() {
        let m = mesh(3, MeshFlavor::Dirichlet);
        let s = FunctionSpace::new(m, 2, 1, Constraint::None).unwrap();
        let f = |p: &Point2<f64>| 1.0 + p.x - 2.0 * p.y + 3.0 * p.x * p.y - p.x * p.x;
        let fh = interpolate(&s, f);
        for &(x, y) in &[(0.1, 0.2), (0.77, 0.31), (0.5, 0.95)] {
            let p = Point2::new(x, y);
            let qv = fh.eval_point(&p);
            assert!((qv.value[0] - f(&p)).abs() < 1e-13);
            let grad = Vector2::new(1.0 + 3.0 * y - 2.0 * x, -2.0 + 3.0 * x);
            assert!((qv.gradient() - grad).norm() < 1e-12);
        }
    }

    #[test]
    fn linear_fields_at_quadrature_points() {
        let m = mesh(3, MeshFlavor::Dirichlet);
        let vs = FunctionSpace::new(m.clone(), 1, 2, Constraint::None).unwrap();
        let shear = interpolate_vector(&vs, |p| Vector2::new(p.y, 0.0));
        for qv in shear.eval_at_qp(4).unwrap().iter().flatten() {
            assert!((qv.rot() - 1.0).abs() < 1e-12);
            assert!(qv.divergence().abs() < 1e-12);
        }
        let radial = interpolate_vector(&vs, |p| p.coords);
        for qv in radial.eval_at_qp(2).unwrap().iter().flatten() {
            assert!((qv.divergence() - 2.0).abs() < 1e-12);
            assert!(qv.rot().abs() < 1e-12);
        }
        let ss = FunctionSpace::new(m, 1, 1, Constraint::None).unwrap();
        let u = interpolate(&ss, |p| p.x);
        for qv in u.eval_at_qp(1).unwrap().iter().flatten() {
            assert!((qv.gradient() - Vector2::new(1.0, 0.0)).norm() < 1e-12);
        }
        assert!(u.eval_at_qp(0).is_err());
    }

    #[test]
    fn triple_norm_examples() {
        let m = mesh(4, MeshFlavor::Periodic);
        let ws = FunctionSpace::new(m.clone(), 1, 2, Constraint::ZeroMean).unwrap();
        let us = FunctionSpace::new(m, 1, 1, Constraint::None).unwrap();
        let w = FeFunction::zeros(ws.clone());
        let u = interpolate(&us, |_| -1.5);
        assert!((triple_norm(&w, &u, 2.0).unwrap() - 3.0).abs() < 1e-13);
        assert!(triple_norm(&w, &u, 0.0).is_err());

        let m = mesh(6, MeshFlavor::Dirichlet);
        let ws = FunctionSpace::new(m.clone(), 1, 2, Constraint::None).unwrap();
        let us = FunctionSpace::new(m, 1, 1, Constraint::None).unwrap();
        let w = FeFunction::zeros(ws);
        let u = interpolate(&us, |p| p.x);
        let expected = (13.0f64 / 12.0).sqrt();
        assert!((triple_norm(&w, &u, 0.5).unwrap() - expected).abs() < 1e-13);
        let mut u3 = u.clone();
        u3.coeffs_mut().iter_mut().for_each(|c| *c *= -2.5);
        assert!((triple_norm(&w, &u3, 0.5).unwrap() - 2.5 * expected).abs() < 1e-12);
    }

    #[test]
    fn mass_and_stiffness_properties() {
        let m = mesh(5, MeshFlavor::Periodic);
        for deg in [1, 2] {
            let s = FunctionSpace::new(m.clone(), deg, 1, Constraint::None).unwrap();
            let mass = s.mass_matrix().to_dense();
            let stiff = s.stiffness_matrix().to_dense();
            let n = s.n_dofs();
            for i in 0..n {
                for j in 0..n {
                    assert!((mass[i][j] - mass[j][i]).abs() < 1e-15);
                    assert!((stiff[i][j] - stiff[j][i]).abs() < 1e-13);
                }
            }
            let ones = vec![1.0; n];
            let k1 = s.stiffness_matrix().mul_vec(&ones);
            assert!(k1.iter().all(|v| v.abs() < 1e-12), "constants in kernel");
            let total: f64 = s.mass_matrix().quadratic(&ones, &ones);
            assert!((total - 1.0).abs() < 1e-13);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for _ in 0..10 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                assert!(s.mass_matrix().quadratic(&x, &x) > 0.0);
                assert!(s.stiffness_matrix().quadratic(&x, &x) >= -1e-14);
            }
            let w: f64 = s.basis_integrals().iter().sum();
            assert!((w - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn maxwell_identity_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (n, deg) in [(4, 1), (7, 1), (4, 2)] {
            let s = FunctionSpace::new(mesh(n, MeshFlavor::Periodic), deg, 2, Constraint::None)
                .unwrap();
            for _ in 0..5 {
                let c: Vec<f64> = (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let w = FeFunction::new(s.clone(), c).unwrap();
                let (mut jac, mut rot, mut div) = (0.0, 0.0, 0.0);
                for qv in w.eval_at_qp(2 * deg).unwrap().iter().flatten() {
                    jac += qv.weight * qv.jacobian.norm_squared();
                    rot += qv.weight * qv.rot().powi(2);
                    div += qv.weight * qv.divergence().powi(2);
                }
                assert!((jac - rot - div).abs() <= 1e-10 * jac);
            }
        }
    }

    #[test]
    fn poincare_inequality_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s =
            FunctionSpace::new(mesh(8, MeshFlavor::Periodic), 1, 1, Constraint::ZeroMean).unwrap();
        let weights = s.basis_integrals();
        for _ in 0..20 {
            let mut c: Vec<f64> = (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean = crate::sparse::dot(&weights, &c);
            c.iter_mut().for_each(|x| *x -= mean);
            let v = FeFunction::new(s.clone(), c).unwrap();
            let l2 = v.l2_norm();
            let h1 = s
                .stiffness_matrix()
                .quadratic(v.coeffs(), v.coeffs())
                .sqrt();
            assert!(l2 <= 2f64.sqrt() / PI * h1 + 1e-14);
        }
    }

    #[test]
    fn projection_of_affine_and_idempotence() {
        let m = mesh(6, MeshFlavor::Dirichlet);
        let vs = FunctionSpace::new(m.clone(), 1, 2, Constraint::None).unwrap();
        let ss = FunctionSpace::new(m.clone(), 1, 1, Constraint::None).unwrap();
        let u = interpolate(&ss, |p| 2.0 * p.x - 3.0 * p.y + 1.0);
        let w = l2_project(&vs, &u).unwrap();
        for i in 0..vs.n_dofs() {
            assert!((w.component(0)[i] - 2.0).abs() < 1e-10);
            assert!((w.component(1)[i] + 3.0).abs() < 1e-10);
        }
        assert!(l2_project(&ss, &u).is_err());
    }

    #[test]
    fn projected_gradient_converges() {
        let mut errs = Vec::new();
        for n in [16, 32] {
            let m = mesh(n, MeshFlavor::Dirichlet);
            let vs = FunctionSpace::new(m.clone(), 1, 2, Constraint::None).unwrap();
            let ss = FunctionSpace::new(m, 1, 1, Constraint::None).unwrap();
            let u = interpolate(&ss, |p| 0.5 * p.coords.norm_squared());
            let w = l2_project(&vs, &u).unwrap();
            let mut e2 = 0.0;
            for qv in w.eval_at_qp(4).unwrap().iter().flatten() {
                e2 += qv.weight * (qv.value - qv.point.coords).norm_squared();
            }
            errs.push(e2.sqrt());
        }
        assert!(errs[1] < 0.6 * errs[0], "{errs:?}");
        assert!(errs[1] < 2.0 / 32.0);
    }
}
