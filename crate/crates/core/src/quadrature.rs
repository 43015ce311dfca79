//! Quadrature on intervals and triangles.

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "need at least one Gauss point");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Newton iteration on P_n starting from the Chebyshev guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // map [-1,1] -> [0,1]
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Quadrature rule on a triangle in barycentric coordinates; weights sum to
/// one and are scaled by the element area at use.
#[derive(Debug, Clone)]
pub struct TriangleRule {
    degree: usize,
    points: Vec<[f64; 3]>,
    weights: Vec<f64>,
}

impl TriangleRule {
    /// Rule integrating polynomials of total degree `degree` exactly.
    pub fn with_degree(degree: usize) -> Self {
        let (points, weights) = match degree {
            0 | 1 => (vec![[1.0 / 3.0; 3]], vec![1.0]),
            2 => {
                let a = 1.0 / 6.0;
                (orbit3(a), vec![1.0 / 3.0; 3])
            }
            3 | 4 => {
                let mut pts = orbit3(0.445_948_490_915_965);
                pts.extend(orbit3(0.091_576_213_509_771));
                let mut w = vec![0.223_381_589_678_011; 3];
                w.extend([0.109_951_743_655_322; 3]);
                (pts, w)
            }
            5 => {
                let mut pts = vec![[1.0 / 3.0; 3]];
                pts.extend(orbit3(0.470_142_064_105_115));
                pts.extend(orbit3(0.101_286_507_323_456));
                let mut w = vec![0.225];
                w.extend([0.132_394_152_788_506; 3]);
                w.extend([0.125_939_180_544_827; 3]);
                (pts, w)
            }
            _ => collapsed_gauss(degree),
        };
        Self {
            degree: degree.max(1),
            points,
            weights,
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Points `(a, a, 1-2a)` and permutations.
fn orbit3(a: f64) -> Vec<[f64; 3]> {
    let b = 1.0 - 2.0 * a;
    vec![[a, a, b], [a, b, a], [b, a, a]]
}

/// Duffy-collapsed tensor Gauss rule, exact for total degree `degree`.
fn collapsed_gauss(degree: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
    let n = degree.div_ceil(2) + 1;
    let (x, wx) = gauss_legendre(n);
    let mut points = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for (xi, wi) in x.iter().zip(&wx) {
        for (eta, we) in x.iter().zip(&wx) {
            let s = *xi;
            let t = eta * (1.0 - s);
            points.push([1.0 - s - t, s, t]);
            // reference area is 1/2, normalise to unit total weight
            weights.push(2.0 * wi * we * (1.0 - s));
        }
    }
    (points, weights)
}
