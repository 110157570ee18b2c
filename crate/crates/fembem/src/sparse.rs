//! Complex sparse matrices (CSR) and a threshold incomplete-LU factorisation.
//!
//! The CSR type stores the FEM stiffness, surface mass and Laplace-Beltrami
//! matrices and the sparse 0/1 restriction maps. The single ILU routine
//! serves two roles: with a positive drop tolerance it is the ILU(T)
//! preconditioner used on the FEM block, and with a drop tolerance of zero it
//! performs an exact sparse LU factorisation, which is how the surface
//! Helmholtz problems of the OSRC operator and the surface mass matrices are
//! inverted.

use num_complex::Complex64;
use std::collections::BTreeSet;

/// Compressed-sparse-row matrix over `Complex64`.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<Complex64>,
}

impl CsrMatrix {
    /// Builds from unordered (row, col, value) triplets, summing duplicates
    /// and pruning entries that are exactly zero after summation.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, Complex64)>,
    ) -> Self {
        let mut entries: Vec<(usize, usize, Complex64)> = triplets.into_iter().collect();
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut iter = entries.into_iter().peekable();
        while let Some((r, c, mut v)) = iter.next() {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            while let Some(&(r2, c2, v2)) = iter.peek() {
                if r2 == r && c2 == c {
                    v += v2;
                    iter.next();
                } else {
                    break;
                }
            }
            if v != Complex64::ZERO {
                row_ptr[r + 1] += 1;
                col_idx.push(c);
                values.push(v);
            }
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Identity matrix of dimension `n`.
    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![Complex64::ONE; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Row `r` as parallel (columns, values) slices.
    pub fn row(&self, r: usize) -> (&[usize], &[Complex64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    /// `y += scale * A x`.
    pub fn apply_add(&self, x: &[Complex64], y: &mut [Complex64], scale: Complex64) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            let mut acc = Complex64::ZERO;
            for (&c, &v) in cols.iter().zip(vals) {
                acc += v * x[c];
            }
            y[r] += scale * acc;
        }
    }

    /// `A x` as a new vector.
    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::ZERO; self.nrows];
        self.apply_add(x, &mut y, Complex64::ONE);
        y
    }

    /// Scales all stored values in place.
    pub fn scale(&mut self, s: Complex64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// `self + scale * other` with a general pattern union.
    pub fn add_scaled(&self, other: &CsrMatrix, scale: Complex64) -> CsrMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for r in 0..self.nrows {
            let (c1, v1) = self.row(r);
            for (&c, &v) in c1.iter().zip(v1) {
                triplets.push((r, c, v));
            }
            let (c2, v2) = other.row(r);
            for (&c, &v) in c2.iter().zip(v2) {
                triplets.push((r, c, scale * v));
            }
        }
        CsrMatrix::from_triplets(self.nrows, self.ncols, triplets)
    }

    /// Transposed copy.
    pub fn transpose(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                triplets.push((c, r, v));
            }
        }
        CsrMatrix::from_triplets(self.ncols, self.nrows, triplets)
    }

    /// Submatrix with the given row and column index lists (in order).
    pub fn extract(&self, rows: &[usize], cols: &[usize]) -> CsrMatrix {
        let mut col_map = vec![usize::MAX; self.ncols];
        for (new, &old) in cols.iter().enumerate() {
            col_map[old] = new;
        }
        let mut triplets = Vec::new();
        for (new_r, &old_r) in rows.iter().enumerate() {
            let (cs, vs) = self.row(old_r);
            for (&c, &v) in cs.iter().zip(vs) {
                if col_map[c] != usize::MAX {
                    triplets.push((new_r, col_map[c], v));
                }
            }
        }
        CsrMatrix::from_triplets(rows.len(), cols.len(), triplets)
    }

    /// Dense copy as a `faer` matrix.
    pub fn to_dense(&self) -> faer::Mat<Complex64> {
        let mut m = faer::Mat::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                m[(r, c)] = v;
            }
        }
        m
    }
}

/// Sparse LU factors from [`ilu_factorize`]; `L U ~ A P` with a column
/// permutation `P` from partial pivoting.
#[derive(Debug, Clone)]
pub struct IluFactorization {
    n: usize,
    /// Strictly lower rows, unit diagonal implied; indices are pivot
    /// positions.
    l_rows: Vec<Vec<(usize, Complex64)>>,
    /// Strictly upper rows plus the diagonal value, indices are positions.
    u_rows: Vec<Vec<(usize, Complex64)>>,
    u_diag: Vec<Complex64>,
    /// `perm[position] = original column index`.
    perm: Vec<usize>,
    /// Smallest over largest pivot magnitude, a cheap singularity signal.
    pub pivot_ratio: f64,
    /// Drop tolerance the factorisation was built with.
    pub drop_tol: f64,
}

/// Threshold ILU with column pivoting (ILUTP).
///
/// Entries below `drop_tol` times the 2-norm of their original row are
/// dropped; `drop_tol = 0` keeps all fill and yields an exact sparse LU.
/// Columns are swapped when the natural pivot is much smaller than the best
/// candidate in the row. A pivot that is exactly zero after dropping is
/// reported as an error.
pub fn ilu_factorize(a: &CsrMatrix, drop_tol: f64) -> crate::Result<IluFactorization> {
    assert_eq!(a.nrows(), a.ncols(), "ilu requires a square matrix");
    let n = a.nrows();
    const PIVOT_PREFERENCE: f64 = 0.1;

    let mut perm: Vec<usize> = (0..n).collect();
    let mut iperm: Vec<usize> = (0..n).collect();
    // Working rows store original column indices; converted to final pivot
    // positions once the factorisation (and hence the permutation) is fixed.
    let mut l_rows: Vec<Vec<(usize, Complex64)>> = Vec::with_capacity(n);
    let mut u_rows: Vec<Vec<(usize, Complex64)>> = Vec::with_capacity(n);
    let mut u_diag = vec![Complex64::ZERO; n];

    let mut w = vec![Complex64::ZERO; n];
    for i in 0..n {
        let (cols, vals) = a.row(i);
        let row_norm = vals.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if row_norm == 0.0 {
            return Err(crate::Error::Solver(format!(
                "ilu: row {i} of the matrix is exactly zero"
            )));
        }
        let tau = drop_tol * row_norm;

        // Scatter the row by pivot position.
        let mut positions = BTreeSet::new();
        for (&c, &v) in cols.iter().zip(vals) {
            let p = iperm[c];
            w[p] = v;
            positions.insert(p);
        }

        // Eliminate with previously factored rows, ascending positions < i.
        let mut l_row = Vec::new();
        let mut next = 0usize;
        while let Some(&p) = positions.range(next..i).next() {
            next = p + 1;
            let factor = w[p] / u_diag[p];
            w[p] = Complex64::ZERO;
            positions.remove(&p);
            if factor.norm() < tau {
                continue;
            }
            for &(c, u) in &u_rows[p] {
                let q = iperm[c];
                debug_assert!(q > p);
                if w[q] == Complex64::ZERO && !positions.contains(&q) {
                    positions.insert(q);
                }
                w[q] -= factor * u;
            }
            l_row.push((p, factor));
        }

        // Pivot among positions >= i, preferring the natural diagonal.
        let mut best_p = i;
        let mut best_mag = if positions.contains(&i) { w[i].norm() } else { 0.0 };
        let natural_mag = best_mag;
        for &p in positions.range(i..) {
            let mag = w[p].norm();
            if mag > best_mag {
                best_mag = mag;
                best_p = p;
            }
        }
        if best_p != i && natural_mag < PIVOT_PREFERENCE * best_mag {
            let (ci, cb) = (perm[i], perm[best_p]);
            perm.swap(i, best_p);
            iperm[ci] = best_p;
            iperm[cb] = i;
            w.swap(i, best_p);
            let had_i = positions.contains(&i);
            let had_b = positions.contains(&best_p);
            if had_i != had_b {
                if had_i {
                    positions.remove(&i);
                    positions.insert(best_p);
                } else {
                    positions.remove(&best_p);
                    positions.insert(i);
                }
            }
        }

        let diag = w[i];
        if diag == Complex64::ZERO {
            return Err(crate::Error::Solver(format!(
                "ilu: zero pivot in row {i} after dropping (drop_tol {drop_tol:.1e})"
            )));
        }
        let mut u_row = Vec::new();
        for &p in positions.range(i + 1..) {
            if w[p].norm() >= tau {
                u_row.push((perm[p], w[p]));
            }
        }
        for &p in positions.range(i..) {
            w[p] = Complex64::ZERO;
        }
        positions.clear();
        u_diag[i] = diag;
        l_rows.push(l_row);
        u_rows.push(u_row);
    }

    // Freeze U indices to final pivot positions (L already stores positions,
    // which can no longer change once a row is passed).
    let u_rows: Vec<Vec<(usize, Complex64)>> = u_rows
        .into_iter()
        .map(|row| row.into_iter().map(|(c, v)| (iperm[c], v)).collect())
        .collect();

    let mut pivot_min = f64::INFINITY;
    let mut pivot_max: f64 = 0.0;
    for d in &u_diag {
        pivot_min = pivot_min.min(d.norm());
        pivot_max = pivot_max.max(d.norm());
    }
    Ok(IluFactorization {
        n,
        l_rows,
        u_rows,
        u_diag,
        perm,
        pivot_ratio: pivot_min / pivot_max,
        drop_tol,
    })
}

impl IluFactorization {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x ~ b` using the stored factors and permutation.
    pub fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(b.len(), self.n);
        let mut z = b.to_vec();
        for i in 0..self.n {
            let mut acc = z[i];
            for &(p, l) in &self.l_rows[i] {
                acc -= l * z[p];
            }
            z[i] = acc;
        }
        for i in (0..self.n).rev() {
            let mut acc = z[i];
            for &(p, u) in &self.u_rows[i] {
                acc -= u * z[p];
            }
            z[i] = acc / self.u_diag[i];
        }
        let mut x = vec![Complex64::ZERO; self.n];
        for p in 0..self.n {
            x[self.perm[p]] = z[p];
        }
        x
    }
}
