//! Symmetric sparse matrices in full CSR storage.
//!
//! `SparseSym` is the currency for precision matrices: both triangles are
//! stored so row iteration, products and quadratic forms stay simple, and
//! symmetry is validated once at construction. `SparseRows` holds rectangular
//! row-sparse matrices (design matrices). `MergedPattern` precomputes the
//! union pattern of two symmetric matrices so repeated evaluations of
//! `alpha*A + beta*B` reuse one allocation.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check at construction.
const SYMMETRY_TOL: f64 = 1e-12;

/// Accumulator for entries of a symmetric matrix. Entries are literal
/// contributions at `(row, col)`; duplicate coordinates are summed and the
/// final matrix must come out symmetric.
#[derive(Debug, Clone)]
pub struct SymTriplets {
    n: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

impl SymTriplets {
    pub fn new(n: usize) -> Self {
        SymTriplets {
            n,
            entries: BTreeMap::new(),
        }
    }

    // Zero values still claim their slot: the pattern must depend only on
    // which coordinates were touched, never on coefficient values, so
    // cached symbolic factorizations and merged patterns stay valid when
    // coefficients move through zero.
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n && col < self.n);
        *self.entries.entry((row, col)).or_insert(0.0) += value;
    }

    /// Adds `value` at `(row, col)` and, when off-diagonal, at `(col, row)`.
    pub fn add_sym(&mut self, row: usize, col: usize, value: f64) {
        self.add(row, col, value);
        if row != col {
            self.add(col, row, value);
        }
    }

    pub fn build(self) -> Result<SparseSym> {
        let n = self.n;
        let mut row_ptr = vec![0usize; n + 1];
        for (&(r, _), _) in &self.entries {
            row_ptr[r + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let nnz = row_ptr[n];
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        for (&(_, c), &v) in &self.entries {
            cols.push(c);
            vals.push(v);
        }
        let mat = SparseSym {
            n,
            row_ptr,
            cols,
            vals,
        };
        mat.check_symmetry()?;
        Ok(mat)
    }
}

/// Symmetric sparse matrix, full CSR storage with sorted column indices per
/// row. Symmetric within `1e-12` relative tolerance by construction.
#[derive(Debug, Clone)]
pub struct SparseSym {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSym {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.cols[lo..hi]
            .iter()
            .copied()
            .zip(self.vals[lo..hi].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.cols[lo..hi].binary_search(&j) {
            Ok(k) => self.vals[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn identity(n: usize) -> SparseSym {
        SparseSym {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    pub fn scaled(&self, c: f64) -> SparseSym {
        let mut out = self.clone();
        for v in &mut out.vals {
            *v *= c;
        }
        out
    }

    /// Symmetric congruence with a diagonal matrix: `D A D` where
    /// `D = diag(d)`. The sparsity pattern is unchanged.
    pub fn diag_congruence(&self, d: &[f64]) -> Result<SparseSym> {
        if d.len() != self.n {
            return Err(Error::dimension(format!(
                "diagonal length {} does not match matrix order {}",
                d.len(),
                self.n
            )));
        }
        let mut out = self.clone();
        for i in 0..self.n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.vals[p] *= d[i] * d[self.cols[p]];
            }
        }
        Ok(out)
    }

    /// Adds `d[i]` to diagonal entry `i`; every diagonal position must
    /// already exist in the pattern.
    pub fn add_diag(&mut self, d: &[f64]) -> Result<()> {
        if d.len() != self.n {
            return Err(Error::dimension(format!(
                "diagonal length {} does not match matrix order {}",
                d.len(),
                self.n
            )));
        }
        for i in 0..self.n {
            let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            match self.cols[lo..hi].binary_search(&i) {
                Ok(k) => self.vals[lo + k] += d[i],
                Err(_) => {
                    return Err(Error::data(format!(
                        "diagonal entry {i} is missing from the sparsity pattern"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[p] * x[self.cols[p]];
            }
            y[i] = acc;
        }
        y
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Product `A * B * A` for symmetric `A`, `B` with `B` typically diagonal
    /// or near-diagonal; used for the three-term precision assembly. Computed
    /// as a plain triple product through triplets.
    pub fn triple_product(&self, mid: &SparseSym) -> Result<SparseSym> {
        if mid.n != self.n {
            return Err(Error::dimension(format!(
                "triple product orders differ: {} vs {}",
                self.n, mid.n
            )));
        }
        // rows of A*mid
        let mut am: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); self.n];
        for i in 0..self.n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let k = self.cols[p];
                let av = self.vals[p];
                for (j, bv) in mid.row(k) {
                    *am[i].entry(j).or_insert(0.0) += av * bv;
                }
            }
        }
        let mut t = SymTriplets::new(self.n);
        for i in 0..self.n {
            for (&k, &v) in &am[i] {
                // (A*mid)[i,k] * A[k,j]
                for (j, av) in self.row(k) {
                    t.add(i, j, v * av);
                }
            }
        }
        t.build()
    }

    fn check_symmetry(&self) -> Result<()> {
        for i in 0..self.n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[p];
                if j < i {
                    continue;
                }
                let a = self.vals[p];
                let b = self.get(j, i);
                if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::data(format!(
                        "matrix not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn from_dense(m: &nalgebra::DMatrix<f64>) -> Result<SparseSym> {
        let mut t = SymTriplets::new(m.nrows());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    t.add(i, j, m[(i, j)]);
                }
            }
        }
        t.build()
    }

    /// Writes the matrix in coordinate text format, one `row col value` line
    /// per stored entry.
    pub fn write_coord(&self, w: &mut impl Write) -> Result<()> {
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                writeln!(w, "{i} {j} {v:.17e}")?;
            }
        }
        Ok(())
    }
}

/// Union pattern of two symmetric matrices with slot maps, so that
/// `alpha*A + beta*B` can be refilled repeatedly without re-merging.
#[derive(Debug, Clone)]
pub struct MergedPattern {
    target: SparseSym,
    a_slots: Vec<usize>,
    b_slots: Vec<usize>,
}

impl MergedPattern {
    pub fn new(a: &SparseSym, b: &SparseSym) -> Result<MergedPattern> {
        if a.n != b.n {
            return Err(Error::dimension(format!(
                "cannot merge patterns of orders {} and {}",
                a.n, b.n
            )));
        }
        let n = a.n;
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::new();
        for i in 0..n {
            let mut merged: Vec<usize> = a.cols[a.row_ptr[i]..a.row_ptr[i + 1]].to_vec();
            merged.extend_from_slice(&b.cols[b.row_ptr[i]..b.row_ptr[i + 1]]);
            merged.sort_unstable();
            merged.dedup();
            row_ptr[i + 1] = row_ptr[i] + merged.len();
            cols.extend_from_slice(&merged);
        }
        let vals = vec![0.0; cols.len()];
        let target = SparseSym {
            n,
            row_ptr,
            cols,
            vals,
        };
        let slot_of = |m: &SparseSym| {
            let mut slots = Vec::with_capacity(m.nnz());
            for i in 0..n {
                for p in m.row_ptr[i]..m.row_ptr[i + 1] {
                    let lo = target.row_ptr[i];
                    let hi = target.row_ptr[i + 1];
                    let k = target.cols[lo..hi].binary_search(&m.cols[p]).unwrap();
                    slots.push(lo + k);
                }
            }
            slots
        };
        let a_slots = slot_of(a);
        let b_slots = slot_of(b);
        Ok(MergedPattern {
            target,
            a_slots,
            b_slots,
        })
    }

    /// Returns `alpha*A + beta*B` on the union pattern. `a` and `b` must have
    /// the same patterns as the matrices the merge was built from.
    pub fn combine(&self, a: &SparseSym, alpha: f64, b: &SparseSym, beta: f64) -> SparseSym {
        debug_assert_eq!(a.nnz(), self.a_slots.len());
        debug_assert_eq!(b.nnz(), self.b_slots.len());
        let mut out = self.target.clone();
        for (p, &slot) in self.a_slots.iter().enumerate() {
            out.vals[slot] += alpha * a.vals[p];
        }
        for (p, &slot) in self.b_slots.iter().enumerate() {
            out.vals[slot] += beta * b.vals[p];
        }
        out
    }
}

/// Rectangular row-sparse matrix; each row holds sorted `(col, value)`
/// pairs. Used for design matrices and projectors.
#[derive(Debug, Clone)]
pub struct SparseRows {
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(ncols: usize) -> Self {
        SparseRows {
            ncols,
            rows: Vec::new(),
        }
    }

    pub fn with_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            for &(c, _) in r {
                if c >= ncols {
                    return Err(Error::dimension(format!(
                        "row {i} references column {c} outside 0..{ncols}"
                    )));
                }
            }
        }
        let mut m = SparseRows { ncols, rows };
        for r in &mut m.rows {
            r.sort_unstable_by_key(|&(c, _)| c);
        }
        Ok(m)
    }

    pub fn push_row(&mut self, mut row: Vec<(usize, f64)>) {
        debug_assert!(row.iter().all(|&(c, _)| c < self.ncols));
        row.sort_unstable_by_key(|&(c, _)| c);
        self.rows.push(row);
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn t_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows.len());
        let mut out = vec![0.0; self.ncols];
        for (r, &yi) in self.rows.iter().zip(y) {
            for &(c, v) in r {
                out[c] += v * yi;
            }
        }
        out
    }

    /// Normal matrix `A' A` as a symmetric sparse matrix.
    pub fn normal_matrix(&self) -> Result<SparseSym> {
        let mut t = SymTriplets::new(self.ncols);
        for r in &self.rows {
            for &(ci, vi) in r {
                for &(cj, vj) in r {
                    t.add(ci, cj, vi * vj);
                }
            }
        }
        t.build()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.rows.len(), self.ncols);
        for (i, r) in self.rows.iter().enumerate() {
            for &(c, v) in r {
                m[(i, c)] = v;
            }
        }
        m
    }
}
