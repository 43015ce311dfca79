//! Structured triangulations of the unit square.
//!
//! Every mesh is an `N x N` grid of squares, each cut along its
//! positive-slope diagonal. Vertex `(i, j)` sits at `(i/N, j/N)` and has
//! index `j * (N + 1) + i`; periodic identification of opposite faces is
//! left to the function spaces built on top.

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshFlavor {
    Periodic,
    Dirichlet,
}

/// Geometry of one triangle, computed once at build time.
#[derive(Debug, Clone)]
pub struct ElementGeometry {
    pub area: f64,
    pub barycenter: Point2<f64>,
    /// Gradients of the three barycentric coordinate functions.
    pub grad_bary: [Vector2<f64>; 3],
}

#[derive(Debug, Clone)]
pub struct Mesh {
    n: usize,
    flavor: MeshFlavor,
    vertices: Vec<Point2<f64>>,
    elements: Vec<[usize; 3]>,
    boundary_vertices: Vec<usize>,
    geometry: Vec<ElementGeometry>,
}

impl Mesh {
    /// Uniform `n x n` triangulation of `(0,1)^2`.
    pub fn uniform(n: usize, flavor: MeshFlavor) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyMesh);
        }
        let side = n + 1;
        let hn = 1.0 / n as f64;
        let mut vertices = Vec::with_capacity(side * side);
        for j in 0..side {
            for i in 0..side {
                vertices.push(Point2::new(i as f64 * hn, j as f64 * hn));
            }
        }

        let mut elements = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let v00 = j * side + i;
                let v10 = v00 + 1;
                let v01 = v00 + side;
                let v11 = v01 + 1;
                elements.push([v00, v10, v11]);
                elements.push([v00, v11, v01]);
            }
        }

        let boundary_vertices = match flavor {
            MeshFlavor::Periodic => Vec::new(),
            MeshFlavor::Dirichlet => (0..side * side)
                .filter(|&v| {
                    let (i, j) = (v % side, v / side);
                    i == 0 || j == 0 || i == n || j == n
                })
                .collect(),
        };

        let geometry = elements
            .iter()
            .map(|tri| element_geometry(&vertices, tri))
            .collect();

        Ok(Self {
            n,
            flavor,
            vertices,
            elements,
            boundary_vertices,
            geometry,
        })
    }

    /// Subdivisions per side.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn flavor(&self) -> MeshFlavor {
        self.flavor
    }

    /// Triangle diameter, `sqrt(2) / N`.
    pub fn h(&self) -> f64 {
        std::f64::consts::SQRT_2 / self.n as f64
    }

    pub fn vertices(&self) -> &[Point2<f64>] {
        &self.vertices
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Vertices on the boundary of the square (empty for periodic meshes).
    pub fn boundary_vertices(&self) -> &[usize] {
        &self.boundary_vertices
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        let side = self.n + 1;
        let (i, j) = (v % side, v / side);
        i == 0 || j == 0 || i == self.n || j == self.n
    }

    pub fn geometry(&self, e: usize) -> &ElementGeometry {
        &self.geometry[e]
    }

    pub fn barycenter(&self, e: usize) -> Result<Point2<f64>> {
        self.geometry
            .get(e)
            .map(|g| g.barycenter)
            .ok_or(Error::ElementOutOfRange {
                index: e,
                count: self.elements.len(),
            })
    }

    /// Grid coordinates `(i, j)` of a vertex.
    pub fn vertex_grid(&self, v: usize) -> (usize, usize) {
        let side = self.n + 1;
        (v % side, v / side)
    }

    /// Element containing `p` together with the barycentric coordinates of
    /// `p` in it. Points on shared edges resolve to the lower-left element;
    /// coordinates are clamped to the closed square.
    pub fn locate(&self, p: &Point2<f64>) -> (usize, [f64; 3]) {
        let nf = self.n as f64;
        let x = (p.x.clamp(0.0, 1.0)) * nf;
        let y = (p.y.clamp(0.0, 1.0)) * nf;
        let i = (x.floor() as usize).min(self.n - 1);
        let j = (y.floor() as usize).min(self.n - 1);
        let s = x - i as f64;
        let t = y - j as f64;
        let square = j * self.n + i;
        if s >= t {
            // (0,0), (1,0), (1,1)
            (2 * square, [1.0 - s, s - t, t])
        } else {
            // (0,0), (1,1), (0,1)
            (2 * square + 1, [1.0 - t, s, t - s])
        }
    }

    /// Total area of all elements.
    pub fn total_area(&self) -> f64 {
        self.geometry.iter().map(|g| g.area).sum()
    }
}

fn element_geometry(vertices: &[Point2<f64>], tri: &[usize; 3]) -> ElementGeometry {
    let [p0, p1, p2] = tri.map(|v| vertices[v]);
    let e1 = p1 - p0;
    let e2 = p2 - p0;
    let det = e1.x * e2.y - e1.y * e2.x;
    let area = 0.5 * det;
    // Rows of the inverse Jacobian give grad(lambda_1), grad(lambda_2).
    let g1 = Vector2::new(e2.y, -e2.x) / det;
    let g2 = Vector2::new(-e1.y, e1.x) / det;
    let g0 = -(g1 + g2);
    let barycenter = Point2::from((p0.coords + p1.coords + p2.coords) / 3.0);
    ElementGeometry {
        area,
        barycenter,
        grad_bary: [g0, g1, g2],
    }
}
