//! Minimal sparse-matrix storage used by assembly and the Krylov solvers.
//!
//! Assembly accumulates into [`Coo`] triplets (duplicates allowed) and
//! converts once into immutable [`Csr`]. Accumulation order is fixed by the
//! element ordering, so repeated runs produce bitwise-identical matrices.

/// Triplet accumulator for finite element assembly.
#[derive(Debug, Clone)]
pub struct Coo {
    nrows: usize,
    ncols: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl Coo {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Coo {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Coo {
            nrows,
            ncols,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if val != 0.0 {
            self.entries.push((row as u32, col as u32, val));
        }
    }

    /// Appends all triplets of `other` (same shape) in order.
    pub fn append(&mut self, other: &Coo) {
        debug_assert_eq!(self.nrows, other.nrows);
        debug_assert_eq!(self.ncols, other.ncols);
        self.entries.extend_from_slice(&other.entries);
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Compresses to CSR, summing duplicate entries.
    ///
    /// Duplicates are summed in increasing column order per row with a
    /// deterministic counting-sort pass, independent of insertion order of
    /// distinct (row, col) keys but fixed for identical inputs.
    pub fn to_csr(&self) -> Csr {
        let n = self.nrows;
        let mut counts = vec![0usize; n + 1];
        for &(r, _, _) in &self.entries {
            counts[r as usize + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        // bucket triplets by row, preserving insertion order within the row
        let mut cols = vec![0u32; self.entries.len()];
        let mut vals = vec![0.0f64; self.entries.len()];
        let mut next = counts.clone();
        for &(r, c, v) in &self.entries {
            let slot = next[r as usize];
            cols[slot] = c;
            vals[slot] = v;
            next[r as usize] += 1;
        }
        // per row: sort by column (stable) and merge duplicates
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut out_cols: Vec<u32> = Vec::with_capacity(self.entries.len());
        let mut out_vals: Vec<f64> = Vec::with_capacity(self.entries.len());
        row_ptr.push(0usize);
        let mut scratch: Vec<(u32, f64)> = Vec::new();
        for r in 0..n {
            scratch.clear();
            for k in counts[r]..counts[r + 1] {
                scratch.push((cols[k], vals[k]));
            }
            scratch.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < scratch.len() {
                let c = scratch[i].0;
                let mut v = 0.0;
                while i < scratch.len() && scratch[i].0 == c {
                    v += scratch[i].1;
                    i += 1;
                }
                out_cols.push(c);
                out_vals.push(v);
            }
            row_ptr.push(out_cols.len());
        }
        Csr {
            nrows: self.nrows,
            ncols: self.ncols,
            row_ptr,
            cols: out_cols,
            vals: out_vals,
        }
    }
}

/// Immutable compressed-sparse-row matrix.
#[derive(Debug, Clone)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Csr {
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        (&self.cols[lo..hi], &self.vals[lo..hi])
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c as usize];
            }
            y[r] = acc;
        }
    }

    /// y = A x, allocating the output.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec(x, &mut y);
        y
    }

    /// Main diagonal (zeros for structurally missing entries).
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.nrows];
        for r in 0..self.nrows.min(self.ncols) {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                if *c as usize == r {
                    d[r] = *v;
                }
            }
        }
        d
    }

    /// Contiguous sub-block `[r0, r1) x [c0, c1)` as a new matrix.
    pub fn submatrix(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Csr {
        let mut coo = Coo::new(r1 - r0, c1 - c0);
        for r in r0..r1 {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                let c = *c as usize;
                if c >= c0 && c < c1 {
                    coo.push(r - r0, c - c0, *v);
                }
            }
        }
        coo.to_csr()
    }

    /// Dense copy, for small test oracles only.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.ncols]; self.nrows];
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                m[r][*c as usize] = *v;
            }
        }
        m
    }

    /// Maximum relative asymmetry max |A - A^T| / max|A|, for diagnostics.
    pub fn asymmetry(&self) -> f64 {
        let mut amax = 0.0f64;
        for v in &self.vals {
            amax = amax.max(v.abs());
        }
        if amax == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                let c = *c as usize;
                // look up A[c][r]
                let (tc, tv) = self.row(c);
                let mut at = 0.0;
                if let Ok(pos) = tc.binary_search(&(r as u32)) {
                    at = tv[pos];
                }
                worst = worst.max((v - at).abs());
            }
        }
        worst / amax
    }
}

/// Dense Gaussian elimination with partial pivoting.
///
/// Direct-solve oracle for small systems in tests and the convergence
/// studies; not used on production paths.
pub fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut x: Vec<f64> = b.to_vec();
    for k in 0..n {
        let mut piv = k;
        for r in k + 1..n {
            if m[r][k].abs() > m[piv][k].abs() {
                piv = r;
            }
        }
        if m[piv][k].abs() < 1e-300 {
            return None;
        }
        m.swap(k, piv);
        x.swap(k, piv);
        for r in k + 1..n {
            let f = m[r][k] / m[k][k];
            if f != 0.0 {
                for c in k..n {
                    m[r][c] -= f * m[k][c];
                }
                x[r] -= f * x[k];
            }
        }
    }
    for k in (0..n).rev() {
        let mut s = x[k];
        for c in k + 1..n {
            s -= m[k][c] * x[c];
        }
        x[k] = s / m[k][k];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_triplets_are_summed() {
        let mut coo = Coo::new(2, 2);
        coo.push(0, 0, 1.0);
        coo.push(0, 1, 2.0);
        coo.push(0, 0, 3.0);
        coo.push(1, 1, -1.0);
        let csr = coo.to_csr();
        assert_eq!(csr.nnz(), 3);
        let d = csr.to_dense();
        assert_eq!(d[0][0], 4.0);
        assert_eq!(d[0][1], 2.0);
        assert_eq!(d[1][1], -1.0);
    }

    #[test]
    fn matvec_matches_dense() {
        let mut coo = Coo::new(3, 3);
        for (r, c, v) in [(0, 0, 2.0), (0, 2, 1.0), (1, 1, 3.0), (2, 0, -1.0), (2, 2, 5.0)] {
            coo.push(r, c, v);
        }
        let csr = coo.to_csr();
        let x = vec![1.0, 2.0, 3.0];
        let y = csr.apply(&x);
        assert_eq!(y, vec![5.0, 6.0, 14.0]);
    }

    #[test]
    fn dense_solve_roundtrip() {
        let a = vec![
            vec![4.0, 1.0, 0.0],
            vec![1.0, 3.0, 1.0],
            vec![0.0, 1.0, 2.0],
        ];
        let b = vec![1.0, 2.0, 3.0];
        let x = dense_solve(&a, &b).unwrap();
        for r in 0..3 {
            let mut s = 0.0;
            for c in 0..3 {
                s += a[r][c] * x[c];
            }
            assert!((s - b[r]).abs() < 1e-12);
        }
    }
}
