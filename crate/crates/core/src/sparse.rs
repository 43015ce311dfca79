//! Thin sparse-matrix layer over `faer`: triplet assembly, products and a
//! pivoted LU with iterative refinement.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::matmul::sparse_sparse_matmul;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, MatRef, Par};

use crate::error::{Error, Result};

/// Coordinate-format accumulator; duplicate entries are summed on build.
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<Triplet<usize, usize, f64>>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if val != 0.0 {
            self.entries.push(Triplet::new(row, col, val));
        }
    }

    /// Stores the entry even when it is zero, keeping the sparsity pattern
    /// independent of the values.
    #[inline]
    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push(Triplet::new(row, col, val));
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = (usize, usize, f64)>) {
        self.entries
            .extend(entries.into_iter().map(|(r, c, v)| Triplet::new(r, c, v)));
    }

    /// Adds `scale * block` with the block's entries shifted by the offsets.
    pub fn add_block(&mut self, block: &SparseMatrix, row0: usize, col0: usize, scale: f64) {
        for (r, c, v) in block.iter() {
            self.add(row0 + r, col0 + c, scale * v);
        }
    }

    /// Adds `scale * block^T` at the offsets.
    pub fn add_block_transposed(
        &mut self,
        block: &SparseMatrix,
        row0: usize,
        col0: usize,
        scale: f64,
    ) {
        for (r, c, v) in block.iter() {
            self.add(row0 + c, col0 + r, scale * v);
        }
    }

    pub fn build(&self) -> SparseMatrix {
        let inner = SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &self.entries)
            .expect("triplet indices are in range by construction");
        SparseMatrix { inner }
    }
}

/// Compressed sparse column matrix.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    inner: SparseColMat<usize, f64>,
}

impl SparseMatrix {
    pub fn nrows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn nnz(&self) -> usize {
        self.inner.val().len()
    }

    /// Iterates over stored `(row, col, value)` entries.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let a = self.inner.as_ref();
        let col_ptr = a.col_ptr();
        let rows = a.row_idx();
        let vals = a.val();
        (0..a.ncols())
            .flat_map(move |j| (col_ptr[j]..col_ptr[j + 1]).map(move |k| (rows[k], j, vals[k])))
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols());
        let mut y = vec![0.0; self.nrows()];
        for (r, c, v) in self.iter() {
            y[r] += v * x[c];
        }
        y
    }

    /// `y = A^T x`
    pub fn transpose_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows());
        let a = self.inner.as_ref();
        let col_ptr = a.col_ptr();
        let rows = a.row_idx();
        let vals = a.val();
        (0..a.ncols())
            .map(|j| {
                (col_ptr[j]..col_ptr[j + 1])
                    .map(|k| vals[k] * x[rows[k]])
                    .sum()
            })
            .collect()
    }

    /// Bilinear form `x^T A y`.
    pub fn quadratic(&self, x: &[f64], y: &[f64]) -> f64 {
        self.iter().map(|(r, c, v)| x[r] * v * y[c]).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols()]; self.nrows()];
        for (r, c, v) in self.iter() {
            d[r][c] += v;
        }
        d
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut t = TripletBuilder::with_capacity(self.ncols(), self.nrows(), self.nnz());
        t.extend(self.iter().map(|(r, c, v)| (c, r, v)));
        t.build()
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.ncols() != other.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "product of {}x{} and {}x{}",
                self.nrows(),
                self.ncols(),
                other.nrows(),
                other.ncols()
            )));
        }
        let inner = sparse_sparse_matmul(self.inner.as_ref(), other.inner.as_ref(), 1.0, Par::Seq)
            .map_err(|e| Error::LinearSolve(format!("sparse product: {e:?}")))?;
        Ok(SparseMatrix { inner })
    }

    /// Pivoted sparse LU factorisation.
    pub fn lu(&self) -> Result<LuSolver> {
        let symbolic = SymbolicLu::try_new(self.inner.symbolic())
            .map_err(|e| Error::LinearSolve(format!("symbolic LU: {e:?}")))?;
        self.lu_with_symbolic(&symbolic)
    }

    pub fn symbolic_lu(&self) -> Result<SymbolicLu<usize>> {
        SymbolicLu::try_new(self.inner.symbolic())
            .map_err(|e| Error::LinearSolve(format!("symbolic LU: {e:?}")))
    }

    /// Numeric factorisation reusing a symbolic analysis of the same pattern.
    pub fn lu_with_symbolic(&self, symbolic: &SymbolicLu<usize>) -> Result<LuSolver> {
        let lu = Lu::try_new_with_symbolic(symbolic.clone(), self.inner.as_ref())
            .map_err(|e| Error::LinearSolve(format!("numeric LU: {e:?}")))?;
        let mut row_sums = vec![0.0; self.nrows()];
        for (r, _, v) in self.iter() {
            row_sums[r] += v.abs();
        }
        Ok(LuSolver {
            lu,
            matrix: self.clone(),
            anorm: inf_norm(&row_sums),
        })
    }
}

/// Factorised matrix; solves refine until the normwise backward error
/// `|b - A x|_inf / (|A|_inf |x|_inf + |b|_inf)` is below `1e-12` or stops
/// improving.
pub struct LuSolver {
    lu: Lu<usize, f64>,
    matrix: SparseMatrix,
    anorm: f64,
}

impl LuSolver {
    const TARGET: f64 = 1e-12;
    /// Refinement gives up above this backward error.
    const ACCEPT: f64 = 1e-8;
    const MAX_STEPS: usize = 10;

    fn raw_solve(&self, rhs: &[f64]) -> Vec<f64> {
        let b = MatRef::from_column_major_slice(rhs, rhs.len(), 1);
        let x: Mat<f64> = self.lu.solve(b);
        (0..rhs.len()).map(|i| x[(i, 0)]).collect()
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.matrix.nrows();
        if rhs.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "right-hand side has length {}, matrix has {n} rows",
                rhs.len()
            )));
        }
        let bnorm = inf_norm(rhs);
        let mut x = self.raw_solve(rhs);
        if bnorm == 0.0 {
            return Ok(x);
        }
        let mut best = (f64::INFINITY, x.clone());
        for _ in 0..Self::MAX_STEPS {
            let ax = self.matrix.mul_vec(&x);
            let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let rel = inf_norm(&r) / (self.anorm * inf_norm(&x) + bnorm);
            if !rel.is_finite() || x.iter().chain(&r).any(|v| !v.is_finite()) {
                return Err(Error::LinearSolve("non-finite residual".into()));
            }
            if rel >= best.0 {
                break;
            }
            best = (rel, x.clone());
            if rel <= Self::TARGET {
                break;
            }
            let dx = self.raw_solve(&r);
            for (xi, d) in x.iter_mut().zip(dx) {
                *xi += d;
            }
        }
        let (rel, x) = best;
        if rel > Self::ACCEPT {
            return Err(Error::LinearSolve(format!(
                "backward error {rel:e} after refinement"
            )));
        }
        Ok(x)
    }
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_and_products_agree() {
        let mut t = TripletBuilder::new(3, 3);
        t.add(0, 0, 1.0);
        t.add(0, 0, 1.0);
        t.add(1, 2, -3.0);
        t.add(2, 1, 5.0);
        t.add(1, 1, 4.0);
        t.add(2, 2, 1.0);
        let a = t.build();
        assert_eq!(a.to_dense()[0][0], 2.0);
        let x = [1.0, 2.0, 3.0];
        assert_eq!(a.mul_vec(&x), vec![2.0, -1.0, 13.0]);
        assert_eq!(a.transpose_mul_vec(&x), vec![2.0, 23.0, -3.0]);
        assert!((a.quadratic(&x, &x) - (2.0 - 2.0 + 39.0)).abs() < 1e-14);
    }

    #[test]
    fn product_and_transpose_match_dense() {
        let mut t = TripletBuilder::new(2, 3);
        t.extend([(0, 0, 1.0), (0, 2, 2.0), (1, 1, -1.0)]);
        let a = t.build();
        let at = a.transpose();
        assert_eq!(
            at.to_dense(),
            vec![vec![1.0, 0.0], vec![0.0, -1.0], vec![2.0, 0.0]]
        );
        let p = a.matmul(&at).unwrap();
        assert_eq!(p.to_dense(), vec![vec![5.0, 0.0], vec![0.0, 1.0]]);
        assert!(at.matmul(&at).is_err());
    }

    #[test]
    fn lu_solves_indefinite_saddle_system() {
        // [[2, 1, 1], [1, 3, 1], [1, 1, 0]] has a zero diagonal entry
        let mut t = TripletBuilder::new(3, 3);
        for (r, c, v) in [
            (0, 0, 2.0),
            (0, 1, 1.0),
            (1, 0, 1.0),
            (1, 1, 3.0),
            (0, 2, 1.0),
            (2, 0, 1.0),
            (1, 2, 1.0),
            (2, 1, 1.0),
        ] {
            t.add(r, c, v);
        }
        let a = t.build();
        let x = a.lu().unwrap().solve(&[1.0, 2.0, 3.0]).unwrap();
        let ax = a.mul_vec(&x);
        for (l, r) in ax.iter().zip([1.0, 2.0, 3.0]) {
            assert!((l - r).abs() < 1e-13);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut t = TripletBuilder::new(2, 2);
        t.add(0, 0, 1.0);
        t.add(0, 1, 1.0);
        t.add(1, 0, 1.0);
        t.add(1, 1, 1.0);
        let a = t.build();
        let res = a.lu().and_then(|lu| lu.solve(&[1.0, 0.0]));
        assert!(res.is_err());
    }
}
