//! Sparse LDL' factorization of symmetric positive definite matrices.
//!
//! The pipeline is the classic simplicial one: a fill-reducing permutation
//! (reverse Cuthill-McKee), a symbolic pass building the elimination tree and
//! column counts, then an up-looking numeric factorization `P A P' = L D L'`
//! with unit lower-triangular `L`. On top of the factor sit triangular
//! solves, the log-determinant, a whitening transform for sampling, and a
//! partial inversion that recovers the entries of the inverse on the pattern
//! of `L + L'` (enough for marginal variances and trace terms).

use crate::error::{Error, Result};
use crate::sparse::SparseSym;

const NONE: usize = usize::MAX;

/// Fill-reducing orderings for the factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ordering {
    /// Identity permutation; mainly for tests and comparisons.
    Natural,
    /// Reverse Cuthill-McKee bandwidth reduction.
    Rcm,
}

/// Reverse Cuthill-McKee ordering of the pattern of `a`.
/// Returns `perm` with `perm[new] = old`. Deterministic: BFS from a
/// pseudo-peripheral vertex per connected component, neighbors visited in
/// order of increasing degree with index as tie-break.
pub fn rcm_order(a: &SparseSym) -> Vec<usize> {
    let n = a.n();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| a.row(i).map(|(j, _)| j).filter(|&j| j != i).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(|r| r.len()).collect();

    let bfs = |start: usize, visited: &mut [bool], order: &mut Vec<usize>| -> usize {
        // runs a BFS, appending to order; returns the last vertex reached
        let mark = order.len();
        order.push(start);
        visited[start] = true;
        let mut head = mark;
        while head < order.len() {
            let v = order[head];
            head += 1;
            let mut nbrs: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            nbrs.sort_unstable_by_key(|&u| (degree[u], u));
            for u in nbrs {
                if !visited[u] {
                    visited[u] = true;
                    order.push(u);
                }
            }
        }
        *order.last().unwrap()
    };

    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    loop {
        // lowest-degree unvisited vertex seeds the next component
        let Some(seed) = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (degree[v], v))
        else {
            break;
        };
        // one double-BFS sweep toward a pseudo-peripheral vertex
        let mut probe_visited = visited.clone();
        let mut probe_order = Vec::new();
        let far = bfs(seed, &mut probe_visited, &mut probe_order);
        bfs(far, &mut visited, &mut order);
    }
    order.reverse();
    order
}

/// Symbolic analysis of a symmetric matrix: permutation, permuted
/// upper-triangular pattern, elimination tree and column pointers of `L`.
/// Reusable across numeric factorizations with identical pattern.
#[derive(Debug, Clone)]
pub struct Symbolic {
    n: usize,
    /// perm[new] = old
    perm: Vec<usize>,
    /// iperm[old] = new
    iperm: Vec<usize>,
    /// permuted upper-triangular CSC pattern (column pointers and row ids)
    ap: Vec<usize>,
    ai: Vec<usize>,
    /// per ai entry, index of the source value in the matrix value array
    asrc: Vec<usize>,
    parent: Vec<usize>,
    /// column pointers of L (strict lower part)
    lp: Vec<usize>,
}

impl Symbolic {
    pub fn analyze(a: &SparseSym, ordering: Ordering) -> Symbolic {
        let n = a.n();
        let perm = match ordering {
            Ordering::Natural => (0..n).collect::<Vec<_>>(),
            Ordering::Rcm => rcm_order(a),
        };
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // permuted upper triangle in CSC: column k holds rows i <= k
        let mut col_entries: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        let mut src = 0usize;
        for old_i in 0..n {
            for (old_j, _) in a.row(old_i) {
                let (pi, pj) = (iperm[old_i], iperm[old_j]);
                if pi <= pj {
                    col_entries[pj].push((pi, src));
                }
                src += 1;
            }
        }
        let mut ap = vec![0usize; n + 1];
        let mut ai = Vec::new();
        let mut asrc = Vec::new();
        for (k, col) in col_entries.iter_mut().enumerate() {
            col.sort_unstable();
            ap[k + 1] = ap[k] + col.len();
            for &(i, s) in col.iter() {
                ai.push(i);
                asrc.push(s);
            }
        }

        // elimination tree and column counts of L
        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for p in ap[k]..ap[k + 1] {
                let mut i = ai[p];
                while i < k && flag[i] != k {
                    if parent[i] == NONE {
                        parent[i] = k;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }

        Symbolic {
            n,
            perm,
            iperm,
            ap,
            ai,
            asrc,
            parent,
            lp,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Numeric factorization `P A P' = L D L'` of a matrix with the pattern
    /// this symbolic analysis was built from. Fails unless the matrix is
    /// positive definite; the error names the smallest pivot encountered.
    /// Numeric factorization. A plain f64 pass runs first; if it meets a
    /// nonpositive pivot the factorization retries in double-double
    /// arithmetic, which resolves positive definite matrices whose
    /// smallest eigenvalue sits below the plain f64 rounding floor.
    pub fn factor(&self, a: &SparseSym) -> Result<LdlFactor> {
        match self.factor_impl::<false>(a) {
            Ok(f) => Ok(f),
            Err(Error::Numerical(_)) => self.factor_impl::<true>(a),
            Err(e) => Err(e),
        }
    }

    fn factor_impl<const EXTENDED: bool>(&self, a: &SparseSym) -> Result<LdlFactor> {
        let n = self.n;
        if a.n() != n {
            return Err(Error::dimension(format!(
                "factor: matrix order {} does not match symbolic order {}",
                a.n(),
                n
            )));
        }
        let avals = {
            // gather values in ai order
            let mut dense_vals = Vec::with_capacity(self.asrc.len());
            let flat: Vec<f64> = (0..n).flat_map(|i| a.row(i).map(|(_, v)| v)).collect();
            for &s in &self.asrc {
                dense_vals.push(flat[s]);
            }
            dense_vals
        };

        let nnz_l = self.lp[n];
        let mut li = vec![0usize; nnz_l];
        let mut lx = vec![Dd::ZERO; nnz_l];
        let mut d = vec![Dd::ZERO; n];
        let mut y = vec![Dd::ZERO; n];
        let mut pattern = vec![0usize; n];
        let mut stack = vec![0usize; n];
        let mut flag = vec![NONE; n];
        let mut fill = vec![0usize; n];

        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            for p in self.ap[k]..self.ap[k + 1] {
                let i = self.ai[p];
                y[i] = y[i].add::<EXTENDED>(Dd::from(avals[p]));
                let mut len = 0usize;
                let mut j = i;
                while j < k && flag[j] != k {
                    stack[len] = j;
                    len += 1;
                    flag[j] = k;
                    j = self.parent[j];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pattern[top] = stack[len];
                }
            }
            let mut dk = y[k];
            y[k] = Dd::ZERO;
            for t in top..n {
                let i = pattern[t];
                let yi = y[i];
                y[i] = Dd::ZERO;
                let lki = yi.div::<EXTENDED>(d[i]);
                for p in self.lp[i]..self.lp[i] + fill[i] {
                    let upd = lx[p].mul::<EXTENDED>(yi);
                    y[li[p]] = y[li[p]].sub::<EXTENDED>(upd);
                }
                let slot = self.lp[i] + fill[i];
                li[slot] = k;
                lx[slot] = lki;
                fill[i] += 1;
                dk = dk.sub::<EXTENDED>(lki.mul::<EXTENDED>(yi));
            }
            d[k] = dk;
            let dv = dk.value();
            if !(dv > 0.0) || !dv.is_finite() {
                return Err(Error::numerical(format!(
                    "sparse factorization failed: smallest pivot {:.6e} at index {} (elimination step {} of {})",
                    dv, self.perm[k], k, n
                )));
            }
        }

        Ok(LdlFactor {
            n,
            perm: self.perm.clone(),
            iperm: self.iperm.clone(),
            lp: self.lp.clone(),
            li,
            lx: lx.iter().map(|v| v.value()).collect(),
            d: d.iter().map(|v| v.value()).collect(),
        })
    }
}

/// Unevaluated double length value `hi + lo`. The `EXTENDED` flag on each
/// operation selects plain f64 arithmetic (lo stays zero, no overhead after
/// monomorphization) or full double-double arithmetic.
#[derive(Debug, Clone, Copy)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    #[inline]
    fn from(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    #[inline]
    fn value(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    #[inline]
    fn add<const EXTENDED: bool>(self, other: Dd) -> Dd {
        if !EXTENDED {
            return Dd::from(self.hi + other.hi);
        }
        let (s, e) = two_sum(self.hi, other.hi);
        let e = e + self.lo + other.lo;
        let (hi, lo) = quick_two_sum(s, e);
        Dd { hi, lo }
    }

    #[inline]
    fn sub<const EXTENDED: bool>(self, other: Dd) -> Dd {
        self.add::<EXTENDED>(other.neg())
    }

    #[inline]
    fn mul<const EXTENDED: bool>(self, other: Dd) -> Dd {
        if !EXTENDED {
            return Dd::from(self.hi * other.hi);
        }
        let (p, e) = two_prod(self.hi, other.hi);
        let e = e + self.hi * other.lo + self.lo * other.hi;
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }

    #[inline]
    fn div<const EXTENDED: bool>(self, other: Dd) -> Dd {
        if !EXTENDED {
            return Dd::from(self.hi / other.hi);
        }
        let q1 = self.hi / other.hi;
        let r1 = self.sub::<true>(Dd::from(q1).mul::<true>(other));
        let q2 = r1.value() / other.hi;
        let r2 = r1.sub::<true>(Dd::from(q2).mul::<true>(other));
        let q3 = r2.value() / other.hi;
        let (s, e) = two_sum(q1, q2);
        let (hi, lo) = quick_two_sum(s, e + q3);
        Dd { hi, lo }
    }
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// One-shot convenience: analyze with the given ordering and factor.
pub fn factor(a: &SparseSym, ordering: Ordering) -> Result<LdlFactor> {
    Symbolic::analyze(a, ordering).factor(a)
}

/// Numeric `L D L'` factor of a permuted symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
}

impl LdlFactor {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn log_det(&self) -> f64 {
        self.d.iter().map(|&v| v.ln()).sum()
    }

    pub fn smallest_pivot(&self) -> f64 {
        self.d.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Solves `A x = b` in the original (unpermuted) index space.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(b.len(), self.n);
        let mut x: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        self.solve_permuted(&mut x);
        let mut out = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }

    fn solve_permuted(&self, x: &mut [f64]) {
        let n = self.n;
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                for p in self.lp[j]..self.lp[j + 1] {
                    x[self.li[p]] -= self.lx[p] * xj;
                }
            }
        }
        for j in 0..n {
            x[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut acc = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                acc -= self.lx[p] * x[self.li[p]];
            }
            x[j] = acc;
        }
    }

    /// Maps iid standard normal draws `z` to a vector with covariance
    /// `A^{-1}`: returns `P' L^{-T} D^{-1/2} z` in original indexing.
    pub fn correlate(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.n);
        let n = self.n;
        let mut x: Vec<f64> = (0..n).map(|j| z[j] / self.d[j].sqrt()).collect();
        for j in (0..n).rev() {
            let mut acc = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                acc -= self.lx[p] * x[self.li[p]];
            }
            x[j] = acc;
        }
        let mut out = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }

    /// Entries of `A^{-1}` on the pattern of `L + L'` plus the diagonal.
    pub fn partial_inverse(&self) -> PartialInverse {
        let n = self.n;
        let mut zx = vec![0.0f64; self.lx.len()];
        let mut zdiag = vec![0.0f64; n];
        for j in (0..n).rev() {
            let (lo, hi) = (self.lp[j], self.lp[j + 1]);
            // strict lower entries of column j, descending row order
            for q in (lo..hi).rev() {
                let i = self.li[q];
                let mut acc = 0.0;
                for p in lo..hi {
                    let k = self.li[p];
                    let z = if k == i {
                        zdiag[i]
                    } else {
                        let (a, b) = if k > i { (k, i) } else { (i, k) };
                        self.lookup(&zx, a, b)
                    };
                    acc -= self.lx[p] * z;
                }
                zx[q] = acc;
            }
            let mut acc = 1.0 / self.d[j];
            for p in lo..hi {
                acc -= self.lx[p] * zx[p];
            }
            zdiag[j] = acc;
        }
        PartialInverse {
            factor: self.clone(),
            zx,
            zdiag,
        }
    }

    /// Value of Z at (row a, col b) with a > b, where Z mirrors L's pattern.
    fn lookup(&self, zx: &[f64], a: usize, b: usize) -> f64 {
        let lo = self.lp[b];
        let hi = self.lp[b + 1];
        match self.li[lo..hi].binary_search(&a) {
            Ok(k) => zx[lo + k],
            Err(_) => 0.0,
        }
    }
}

/// Selected entries of the inverse of a factored matrix: exact on the
/// pattern of `L + L'` and on the diagonal, in original indexing.
#[derive(Debug, Clone)]
pub struct PartialInverse {
    factor: LdlFactor,
    zx: Vec<f64>,
    zdiag: Vec<f64>,
}

impl PartialInverse {
    /// Diagonal of the inverse in original indexing.
    pub fn diag(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.factor.n];
        for (new, &old) in self.factor.perm.iter().enumerate() {
            out[old] = self.zdiag[new];
        }
        out
    }

    /// Entry `(i, j)` of the inverse (original indexing) when the permuted
    /// position lies on the computed pattern; `None` otherwise.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (pi, pj) = (self.factor.iperm[i], self.factor.iperm[j]);
        if pi == pj {
            return Some(self.zdiag[pi]);
        }
        let (a, b) = if pi > pj { (pi, pj) } else { (pj, pi) };
        let lo = self.factor.lp[b];
        let hi = self.factor.lp[b + 1];
        match self.factor.li[lo..hi].binary_search(&a) {
            Ok(k) => Some(self.zx[lo + k]),
            Err(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::SymTriplets;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, density: f64, seed: u64) -> SparseSym {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut t = SymTriplets::new(n);
        for i in 0..n {
            t.add(i, i, n as f64);
            for j in 0..i {
                if rng.random::<f64>() < density {
                    let v = rng.random_range(-1.0..1.0);
                    t.add_sym(i, j, v);
                }
            }
        }
        t.build().unwrap()
    }

    #[test]
    fn solve_matches_dense() {
        for seed in 0..3u64 {
            let a = random_spd(25, 0.2, seed);
            let f = factor(&a, Ordering::Rcm).unwrap();
            let b: Vec<f64> = (0..25).map(|i| (i as f64).sin()).collect();
            let x = f.solve(&b);
            let dense = a.to_dense();
            let expect = dense
                .clone()
                .cholesky()
                .unwrap()
                .solve(&nalgebra::DVector::from_column_slice(&b));
            for i in 0..25 {
                assert_relative_eq!(x[i], expect[i], epsilon = 1e-10, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn log_det_matches_dense() {
        let a = random_spd(30, 0.15, 7);
        let f = factor(&a, Ordering::Rcm).unwrap();
        let dense_det: f64 = a
            .to_dense()
            .cholesky()
            .unwrap()
            .l()
            .diagonal()
            .iter()
            .map(|v| 2.0 * v.ln())
            .sum();
        assert_relative_eq!(f.log_det(), dense_det, epsilon = 1e-9, max_relative = 1e-11);
    }

    #[test]
    fn orderings_agree() {
        let a = random_spd(20, 0.3, 11);
        let f1 = factor(&a, Ordering::Natural).unwrap();
        let f2 = factor(&a, Ordering::Rcm).unwrap();
        assert_relative_eq!(f1.log_det(), f2.log_det(), epsilon = 1e-10);
        let b: Vec<f64> = (0..20).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let x1 = f1.solve(&b);
        let x2 = f2.solve(&b);
        for i in 0..20 {
            assert_relative_eq!(x1[i], x2[i], epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn indefinite_matrix_reports_pivot() {
        let mut t = SymTriplets::new(2);
        t.add(0, 0, 1.0);
        t.add(1, 1, -2.0);
        let a = t.build().unwrap();
        let err = factor(&a, Ordering::Natural).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("smallest pivot"), "message was: {msg}");
        assert!(msg.contains("-2"), "message was: {msg}");
    }

    #[test]
    fn singular_matrix_rejected() {
        // rank-deficient: second row is zero
        let mut t = SymTriplets::new(2);
        t.add(0, 0, 1.0);
        t.add(1, 1, 0.0);
        let a = t.build().unwrap();
        assert!(factor(&a, Ordering::Natural).is_err());
    }

    #[test]
    fn partial_inverse_matches_dense_inverse() {
        for seed in [3u64, 5] {
            let a = random_spd(20, 0.25, seed);
            let f = factor(&a, Ordering::Rcm).unwrap();
            let pinv = f.partial_inverse();
            let dense_inv = a.to_dense().try_inverse().unwrap();
            let diag = pinv.diag();
            for i in 0..20 {
                assert_relative_eq!(diag[i], dense_inv[(i, i)], epsilon = 1e-10);
            }
            // every stored entry of A must be on the computed pattern
            for i in 0..20 {
                for (j, _) in a.row(i) {
                    let z = pinv.get(i, j).expect("entry of A missing from pattern");
                    assert_relative_eq!(z, dense_inv[(i, j)], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn correlate_has_inverse_covariance() {
        // deterministic check through the identity: correlate(L' sqrt(D) e_k)
        // recovers column k of the identity under A = I scaling
        let a = SparseSym::identity(4).scaled(4.0);
        let f = factor(&a, Ordering::Natural).unwrap();
        let z = [2.0, 0.0, 0.0, 0.0];
        let x = f.correlate(&z);
        // Cov(x) = A^{-1} = 0.25 I, so x = z / 2
        assert_relative_eq!(x[0], 1.0);
        assert_relative_eq!(x[1], 0.0);
    }

    #[test]
    fn rcm_is_a_permutation_and_deterministic() {
        let a = random_spd(40, 0.1, 13);
        let p1 = rcm_order(&a);
        let p2 = rcm_order(&a);
        assert_eq!(p1, p2);
        let mut seen = vec![false; 40];
        for &v in &p1 {
            assert!(!seen[v]);
            seen[v] = true;
        }
    }

    #[test]
    fn rcm_reduces_tridiagonal_shuffle_bandwidth() {
        // a shuffled path graph: natural bandwidth is large, RCM restores
        // a narrow band
        let n = 50;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = StdRng::seed_from_u64(1);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut t = SymTriplets::new(n);
        for i in 0..n {
            t.add(order[i], order[i], 4.0);
            if i + 1 < n {
                t.add_sym(order[i], order[i + 1], -1.0);
            }
        }
        let a = t.build().unwrap();
        let perm = rcm_order(&a);
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let bw = (0..n)
            .flat_map(|i| a.row(i).map(move |(j, _)| (i, j)))
            .map(|(i, j)| (iperm[i] as i64 - iperm[j] as i64).abs())
            .max()
            .unwrap();
        assert!(bw <= 2, "bandwidth after RCM was {bw}");
    }
}
