//! Sparse symmetric positive-definite systems.
//!
//! Matrices store their upper triangle in compressed-column form with a
//! pattern fixed at construction. Factorization is an up-looking block LDLᵀ
//! on a minimum-degree permutation; the ordering and elimination tree depend only
//! on the pattern and are computed once by [`CachedLdl`] and reused while the
//! pattern stays the same.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;

use crate::{Error, Mat3, Result};

/// Symmetric matrix with a fixed sparsity pattern (upper triangle stored).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSymmetric {
    /// Builds a zero matrix whose pattern holds every `(i, j)` given (either
    /// order) plus the full diagonal.
    pub fn from_pattern(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cols: Vec<Vec<usize>> = (0..n).map(|j| vec![j]).collect();
        for (i, j) in entries {
            let (r, c) = (i.min(j), i.max(j));
            assert!(c < n, "pattern entry ({i}, {j}) outside {n}x{n}");
            cols[c].push(r);
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for mut col in cols {
            col.sort_unstable();
            col.dedup();
            row_idx.extend(col);
            col_ptr.push(row_idx.len());
        }
        let nnz = row_idx.len();
        SparseSymmetric { n, col_ptr, row_idx, values: vec![0.0; nnz] }
    }

    /// Pattern made of dense `block × block` couplings between the listed
    /// block pairs (and every diagonal block).
    pub fn from_block_pattern(
        blocks: usize,
        block: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Self {
        let mut entries = Vec::new();
        let mut push_block = |a: usize, b: usize| {
            for r in 0..block {
                for c in 0..block {
                    entries.push((a * block + r, b * block + c));
                }
            }
        };
        for b in 0..blocks {
            push_block(b, b);
        }
        for (a, b) in pairs {
            push_block(a, b);
        }
        SparseSymmetric::from_pattern(blocks * block, entries)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (r, c) = (i.min(j), i.max(j));
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[range.clone()].binary_search(&r).ok().map(|k| range.start + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |k| self.values[k])
    }

    /// Adds `v` to entry `(i, j)` and, implicitly, `(j, i)`.
    ///
    /// Panics if the entry is not part of the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.slot(i, j).unwrap_or_else(|| panic!("entry ({i}, {j}) not in pattern"));
        self.values[k] += v;
    }

    /// Adds `value(r, c)` to the stored (upper) part of the dense
    /// `size × size` block whose top-left entry is `(row0, col0)`, with
    /// `row0 <= col0`. The pattern must hold the whole block.
    pub fn add_block(&mut self, row0: usize, col0: usize, size: usize, value: impl Fn(usize, usize) -> f64) {
        debug_assert!(row0 <= col0);
        for c in 0..size {
            let col = col0 + c;
            let last = (row0 + size - 1).min(col);
            let k0 = self.slot(row0, col).unwrap_or_else(|| panic!("entry ({row0}, {col}) not in pattern"));
            for (k, r) in (k0..).zip(row0..=last) {
                debug_assert_eq!(self.row_idx[k], r, "block not contiguous in column {col}");
                self.values[k] += value(r - row0, c);
            }
        }
    }

    /// Adds the 3×3 block `m` at block position `(bi, bj)` of a matrix with
    /// 3×3 blocks. For `bi == bj` only the upper half of `m` is read.
    pub fn add_block3(&mut self, bi: usize, bj: usize, m: &Mat3) {
        let (bi, bj, m) = if bi <= bj { (bi, bj, *m) } else { (bj, bi, m.transpose()) };
        for r in 0..3 {
            for c in 0..3 {
                if bi == bj && r > c {
                    continue;
                }
                self.add(3 * bi + r, 3 * bj + c, m[(r, c)]);
            }
        }
    }

    pub fn add_diagonal(&mut self, delta: f64) {
        for j in 0..self.n {
            let k = self.col_ptr[j + 1] - 1;
            debug_assert_eq!(self.row_idx[k], j);
            self.values[k] += delta;
        }
    }

    pub fn clear_values(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn same_pattern(&self, other: &SparseSymmetric) -> bool {
        self.n == other.n && self.col_ptr == other.col_ptr && self.row_idx == other.row_idx
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for c in 0..self.n {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[k];
                let v = self.values[k];
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
        y
    }

    /// Dense copy with both triangles filled.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for c in 0..self.n {
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[k];
                m[(r, c)] = self.values[k];
                m[(c, r)] = self.values[k];
            }
        }
        m
    }

    /// Iterator over stored upper-triangle entries `(row, col, value)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |c| {
            (self.col_ptr[c]..self.col_ptr[c + 1]).map(move |k| (self.row_idx[k], c, self.values[k]))
        })
    }
}

/// Minimum-degree ordering of the quotient graph whose nodes are groups of
/// `block` consecutive unknowns. Ties break toward the smallest node index.
fn minimum_degree_order(a: &SparseSymmetric, block: usize) -> Vec<usize> {
    let block = if block > 0 && a.n.is_multiple_of(block) { block } else { 1 };
    let nb = a.n / block;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for (r, c, _) in a.entries() {
        let (br, bc) = (r / block, c / block);
        if br != bc {
            adj[br].push(bc);
            adj[bc].push(br);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let mut eliminated = vec![false; nb];
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..nb).map(|v| Reverse((adj[v].len(), v))).collect();
    let mut order = Vec::with_capacity(nb);
    let mut merged = Vec::new();
    while let Some(Reverse((deg, v))) = heap.pop() {
        if eliminated[v] || deg != adj[v].len() {
            continue;
        }
        eliminated[v] = true;
        order.push(v);
        let clique = std::mem::take(&mut adj[v]);
        for &u in &clique {
            // adj[u] ← (adj[u] ∪ clique) \ {u, v}
            merged.clear();
            let (a_list, b_list) = (&adj[u], &clique);
            let (mut i, mut j) = (0, 0);
            while i < a_list.len() || j < b_list.len() {
                let next = match (a_list.get(i), b_list.get(j)) {
                    (Some(&x), Some(&y)) if x == y => {
                        i += 1;
                        j += 1;
                        x
                    }
                    (Some(&x), Some(&y)) if x < y => {
                        i += 1;
                        x
                    }
                    (Some(_), Some(&y)) => {
                        j += 1;
                        y
                    }
                    (Some(&x), None) => {
                        i += 1;
                        x
                    }
                    (None, Some(&y)) => {
                        j += 1;
                        y
                    }
                    (None, None) => unreachable!(),
                };
                if next != u && next != v {
                    merged.push(next);
                }
            }
            std::mem::swap(&mut adj[u], &mut merged);
            heap.push(Reverse((adj[u].len(), u)));
        }
    }
    order.into_iter().flat_map(|b| (0..block).map(move |k| b * block + k)).collect()
}

/// Pattern-only part of the factorization: fill-reducing permutation,
/// elimination tree and column counts of `L`, all at the level of
/// `block`-sized groups of unknowns.
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    n: usize,
    block: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    // pattern of the matrix this analysis belongs to
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    // permuted upper triangle and the slot map from the original values
    pcol_ptr: Vec<usize>,
    prow_idx: Vec<usize>,
    slot_map: Vec<usize>,
    // block elimination tree, block column pointers of L and, per block
    // column, the strictly upper block rows it touches
    parent: Vec<usize>,
    lp: Vec<usize>,
    bcol_ptr: Vec<usize>,
    brow_idx: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl LdlSymbolic {
    pub fn analyze(a: &SparseSymmetric, block: usize) -> Self {
        let n = a.n;
        let block = if block > 0 && n.is_multiple_of(block) { block } else { 1 };
        let perm = minimum_degree_order(a, block);
        let mut pinv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }
        // permuted upper-triangle pattern
        let mut cols: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for c in 0..n {
            for k in a.col_ptr[c]..a.col_ptr[c + 1] {
                let (pr, pc) = (pinv[a.row_idx[k]], pinv[c]);
                cols[pr.max(pc)].push((pr.min(pc), k));
            }
        }
        let mut pcol_ptr = vec![0];
        let mut prow_idx = Vec::with_capacity(a.nnz());
        let mut slot_map = vec![0; a.nnz()];
        for mut col in cols {
            col.sort_unstable();
            for (r, k) in col {
                slot_map[k] = prow_idx.len();
                prow_idx.push(r);
            }
            pcol_ptr.push(prow_idx.len());
        }
        // block pattern of the permuted upper triangle
        let nb = n / block;
        let mut flag = vec![NONE; nb];
        let mut bcol_ptr = vec![0];
        let mut brow_idx = Vec::new();
        for k in 0..nb {
            flag[k] = k;
            for p in pcol_ptr[k * block]..pcol_ptr[(k + 1) * block] {
                let i = prow_idx[p] / block;
                if flag[i] != k {
                    flag[i] = k;
                    brow_idx.push(i);
                }
            }
            bcol_ptr.push(brow_idx.len());
        }
        // elimination tree and column counts
        let mut parent = vec![NONE; nb];
        let mut lnz = vec![0usize; nb];
        flag.fill(NONE);
        for k in 0..nb {
            flag[k] = k;
            for &i0 in &brow_idx[bcol_ptr[k]..bcol_ptr[k + 1]] {
                let mut i = i0;
                while flag[i] != k {
                    if parent[i] == NONE {
                        parent[i] = k;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut lp = vec![0; nb + 1];
        for k in 0..nb {
            lp[k + 1] = lp[k] + lnz[k];
        }
        LdlSymbolic {
            n,
            block,
            perm,
            col_ptr: a.col_ptr.clone(),
            row_idx: a.row_idx.clone(),
            pcol_ptr,
            prow_idx,
            slot_map,
            parent,
            lp,
            bcol_ptr,
            brow_idx,
        }
    }

    pub fn matches(&self, a: &SparseSymmetric) -> bool {
        self.n == a.n && self.col_ptr == a.col_ptr && self.row_idx == a.row_idx
    }

    /// Stored entries of the strictly lower factor `L` (whole blocks).
    pub fn factor_nnz(&self) -> usize {
        self.lp[self.n / self.block] * self.block * self.block
    }

    /// Numeric LDLᵀ with `D` block diagonal; fails if a pivot of a diagonal
    /// block is not strictly positive.
    pub fn factor(&self, a: &SparseSymmetric) -> Result<LdlFactor> {
        assert!(self.matches(a), "matrix pattern differs from the analyzed one");
        match self.block {
            3 => self.factor_blocks::<3>(a),
            12 => self.factor_blocks::<12>(a),
            b => {
                assert_eq!(b, 1, "unsupported block size {b}");
                self.factor_blocks::<1>(a)
            }
        }
    }

    fn factor_blocks<const B: usize>(&self, a: &SparseSymmetric) -> Result<LdlFactor> {
        let nb = self.n / B;
        let mut ax = vec![0.0; a.nnz()];
        for (k, &s) in self.slot_map.iter().enumerate() {
            ax[s] = a.values[k];
        }
        let nnz_l = self.lp[nb];
        let mut li = vec![0usize; nnz_l];
        let mut lx = vec![[[0.0; B]; B]; nnz_l];
        let mut d = vec![[[0.0; B]; B]; nb];
        let mut y = vec![[[0.0; B]; B]; nb];
        let mut pattern = vec![0usize; nb];
        let mut flag = vec![NONE; nb];
        let mut lnz = vec![0usize; nb];
        for k in 0..nb {
            // scatter block column k of the upper triangle into y
            for c in 0..B {
                let col = k * B + c;
                for p in self.pcol_ptr[col]..self.pcol_ptr[col + 1] {
                    let r = self.prow_idx[p];
                    let (i, rr) = (r / B, r % B);
                    y[i][rr][c] += ax[p];
                    if i == k && rr != c {
                        y[k][c][rr] += ax[p];
                    }
                }
            }
            // nonzero pattern of row k of L in topological order
            let mut top = nb;
            flag[k] = k;
            for &i0 in &self.brow_idx[self.bcol_ptr[k]..self.bcol_ptr[k + 1]] {
                let mut i = i0;
                let mut len = 0;
                while flag[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = self.parent[i];
                }
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    pattern[top] = pattern[len];
                }
            }
            let mut dk = std::mem::replace(&mut y[k], [[0.0; B]; B]);
            while top < nb {
                // w = D_i L_kiᵀ
                let i = pattern[top];
                let w = std::mem::replace(&mut y[i], [[0.0; B]; B]);
                let p2 = self.lp[i] + lnz[i];
                for p in self.lp[i]..p2 {
                    sub_mul(&mut y[li[p]], &lx[p], &w);
                }
                let lki = transpose(&block_ldl_solve(&d[i], &w));
                sub_mul(&mut dk, &lki, &w);
                li[p2] = k;
                lx[p2] = lki;
                lnz[i] += 1;
                top += 1;
            }
            if let Err(j) = block_ldl(&mut dk) {
                return Err(Error::FactorizationFailed(self.perm[k * B + j]));
            }
            d[k] = dk;
        }
        let flat = |blocks: Vec<[[f64; B]; B]>| blocks.into_iter().flatten().flatten().collect();
        Ok(LdlFactor { block: B, perm: self.perm.clone(), lp: self.lp.clone(), li, lx: flat(lx), d: flat(d) })
    }
}

/// `y -= l · w`
fn sub_mul<const B: usize>(y: &mut [[f64; B]; B], l: &[[f64; B]; B], w: &[[f64; B]; B]) {
    for r in 0..B {
        for m in 0..B {
            let lrm = l[r][m];
            for c in 0..B {
                y[r][c] -= lrm * w[m][c];
            }
        }
    }
}

fn transpose<const B: usize>(m: &[[f64; B]; B]) -> [[f64; B]; B] {
    let mut t = [[0.0; B]; B];
    for r in 0..B {
        for c in 0..B {
            t[c][r] = m[r][c];
        }
    }
    t
}

/// In-place dense LDLᵀ of a symmetric block from its lower triangle: unit
/// `L` below the diagonal, `D` on it. Returns the first non-positive pivot.
fn block_ldl<const B: usize>(m: &mut [[f64; B]; B]) -> std::result::Result<(), usize> {
    for j in 0..B {
        let mut dj = m[j][j];
        for k in 0..j {
            dj -= m[j][k] * m[j][k] * m[k][k];
        }
        if !(dj > 0.0) || !dj.is_finite() {
            return Err(j);
        }
        m[j][j] = dj;
        for i in j + 1..B {
            let mut v = m[i][j];
            for k in 0..j {
                v -= m[i][k] * m[j][k] * m[k][k];
            }
            m[i][j] = v / dj;
        }
    }
    Ok(())
}

/// `D⁻¹ w` for a block factored by [`block_ldl`].
fn block_ldl_solve<const B: usize>(f: &[[f64; B]; B], w: &[[f64; B]; B]) -> [[f64; B]; B] {
    let mut x = *w;
    for c in 0..B {
        for i in 0..B {
            let mut v = x[i][c];
            for k in 0..i {
                v -= f[i][k] * x[k][c];
            }
            x[i][c] = v;
        }
        for i in 0..B {
            x[i][c] /= f[i][i];
        }
        for i in (0..B).rev() {
            let mut v = x[i][c];
            for k in i + 1..B {
                v -= f[k][i] * x[k][c];
            }
            x[i][c] = v;
        }
    }
    x
}

/// Numeric factor `P A Pᵀ = L D Lᵀ` with `L` unit block lower triangular
/// and `D` block diagonal.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    block: usize,
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
}

impl LdlFactor {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.perm.len();
        assert_eq!(b.len(), n);
        let bs = self.block;
        let nb = n / bs;
        let blk = |p: usize| p * bs * bs..(p + 1) * bs * bs;
        let mut x: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for j in 0..nb {
            for p in self.lp[j]..self.lp[j + 1] {
                let (l, r) = (&self.lx[blk(p)], self.li[p]);
                for a in 0..bs {
                    let v: f64 = (0..bs).map(|m| l[a * bs + m] * x[j * bs + m]).sum();
                    x[r * bs + a] -= v;
                }
            }
        }
        for j in 0..nb {
            let f = &self.d[blk(j)];
            let xj = &mut x[j * bs..(j + 1) * bs];
            for i in 0..bs {
                xj[i] -= (0..i).map(|k| f[i * bs + k] * xj[k]).sum::<f64>();
            }
            for i in 0..bs {
                xj[i] /= f[i * bs + i];
            }
            for i in (0..bs).rev() {
                xj[i] -= (i + 1..bs).map(|k| f[k * bs + i] * xj[k]).sum::<f64>();
            }
        }
        for j in (0..nb).rev() {
            for p in self.lp[j]..self.lp[j + 1] {
                let (l, r) = (&self.lx[blk(p)], self.li[p]);
                for m in 0..bs {
                    let v: f64 = (0..bs).map(|a| l[a * bs + m] * x[r * bs + a]).sum();
                    x[j * bs + m] -= v;
                }
            }
        }
        let mut out = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }
}

/// LDLᵀ solver that performs the symbolic analysis once per pattern.
#[derive(Debug, Clone, Default)]
pub struct CachedLdl {
    symbolic: Option<LdlSymbolic>,
    block: usize,
    analyses: usize,
}

impl CachedLdl {
    /// `block` groups consecutive unknowns for the ordering (3 for per-point
    /// positions, 12 for per-node affine transforms).
    pub fn new(block: usize) -> Self {
        CachedLdl { symbolic: None, block, analyses: 0 }
    }

    /// Number of symbolic analyses performed so far.
    pub fn analyses(&self) -> usize {
        self.analyses
    }

    pub fn factor(&mut self, a: &SparseSymmetric) -> Result<LdlFactor> {
        let stale = self.symbolic.as_ref().is_none_or(|s| !s.matches(a));
        if stale {
            self.symbolic = Some(LdlSymbolic::analyze(a, self.block));
            self.analyses += 1;
        }
        self.symbolic.as_ref().expect("analysis present").factor(a)
    }

    pub fn solve(&mut self, a: &SparseSymmetric, b: &[f64]) -> Result<Vec<f64>> {
        Ok(self.factor(a)?.solve(b))
    }

    /// Solves `A x = b` as `x₀ + A⁻¹(b − A x₀)`, which keeps roundoff
    /// proportional to the step rather than to `x`.
    pub fn solve_near(&mut self, a: &SparseSymmetric, b: &[f64], x0: &[f64]) -> Result<Vec<f64>> {
        let ax = a.mul_vec(x0);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
        let dx = self.factor(a)?.solve(&r);
        Ok(x0.iter().zip(&dx).map(|(p, q)| p + q).collect())
    }
}

/// `‖A x − b‖ / ‖b‖` (or `‖A x‖` when `b = 0`).
pub fn relative_residual(a: &SparseSymmetric, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let r: f64 = ax.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nb > 0.0 {
        r / nb
    } else {
        r
    }
}
