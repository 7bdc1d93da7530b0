//! Small dense SPD factorizations and sparse lower-triangular solves.
//!
//! The dense side stays unblocked on purpose: all dense matrices here are
//! conditioning-set submatrices of size `O(m)`, and an unblocked right-looking
//! Cholesky keeps the arithmetic order deterministic. The sparse side stores
//! factors column by column (compressed columns), because every algorithm in
//! this crate consumes whole columns.

use crate::error::{Error, Result};

/// Dense symmetric positive-definite matrix, row-major.
#[derive(Debug, Clone)]
pub struct DenseSpd {
    n: usize,
    entries: Vec<f64>,
}

impl DenseSpd {
    /// Wrap a row-major symmetric matrix. Rejects asymmetry beyond 1e-12
    /// relative to the largest entry.
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "expected {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        let scale = entries.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-300);
        for i in 0..n {
            for j in 0..i {
                let d = (entries[i * n + j] - entries[j * n + i]).abs();
                if d > 1e-12 * scale {
                    return Err(Error::ShapeMismatch(format!(
                        "asymmetry {:.3e} at ({i},{j})",
                        d
                    )));
                }
            }
        }
        Ok(DenseSpd { n, entries })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Dense lower-triangular Cholesky factor.
#[derive(Debug, Clone)]
pub struct DenseCholesky {
    n: usize,
    /// Row-major lower triangle; strict upper part is zero.
    factor: Vec<f64>,
}

/// Unblocked right-looking Cholesky, `a = C·Cᵀ` with `C` lower-triangular.
pub fn cholesky(a: &DenseSpd) -> Result<DenseCholesky> {
    let n = a.n;
    let mut c = a.entries.clone();
    for j in 0..n {
        let mut d = c[j * n + j];
        for k in 0..j {
            d -= c[j * n + k] * c[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let d = d.sqrt();
        c[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = c[i * n + j];
            for k in 0..j {
                s -= c[i * n + k] * c[j * n + k];
            }
            c[i * n + j] = s / d;
        }
        for i in 0..j {
            c[i * n + j] = 0.0;
        }
    }
    Ok(DenseCholesky { n, factor: c })
}

impl DenseCholesky {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.factor[i * self.n + j]
    }

    /// Solve `C·x = b` in place.
    pub fn forward(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.factor[i * n + k] * b[k];
            }
            b[i] = s / self.factor[i * n + i];
        }
    }

    /// Solve `Cᵀ·x = b` in place.
    pub fn backward(&self, b: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.factor[k * n + i] * b[k];
            }
            b[i] = s / self.factor[i * n + i];
        }
    }

    /// Solve `C·Cᵀ·x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.forward(b);
        self.backward(b);
    }

    pub fn log_det_spd(&self) -> f64 {
        (0..self.n).map(|i| 2.0 * self.get(i, i).ln()).sum()
    }
}

/// Solve `a·x = b` for SPD `a` via Cholesky.
pub fn solve_spd(a: &DenseSpd, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.n {
        return Err(Error::ShapeMismatch(format!(
            "rhs length {} vs dimension {}",
            b.len(),
            a.n
        )));
    }
    let chol = cholesky(a)?;
    let mut x = b.to_vec();
    chol.solve_in_place(&mut x);
    Ok(x)
}

/// Sparse lower-triangular matrix stored by columns.
///
/// Column `i` holds strictly increasing row indices starting at `i`, with
/// matching values. Factors used as precision factors must keep a strictly
/// positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLowerColumns {
    n: usize,
    rows: Vec<Vec<usize>>,
    vals: Vec<Vec<f64>>,
}

impl SparseLowerColumns {
    pub fn new(n: usize, rows: Vec<Vec<usize>>, vals: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != n || vals.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "expected {n} columns, got {} row lists and {} value lists",
                rows.len(),
                vals.len()
            )));
        }
        for (i, (r, v)) in rows.iter().zip(&vals).enumerate() {
            if r.len() != v.len() {
                return Err(Error::ShapeMismatch(format!(
                    "column {i}: {} rows vs {} values",
                    r.len(),
                    v.len()
                )));
            }
            if r.first() != Some(&i) {
                return Err(Error::ShapeMismatch(format!(
                    "column {i} must start at its diagonal"
                )));
            }
            if !r.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::ShapeMismatch(format!(
                    "column {i}: row indices not strictly increasing"
                )));
            }
            if *r.last().unwrap() >= n {
                return Err(Error::ShapeMismatch(format!("column {i}: row out of range")));
            }
        }
        Ok(SparseLowerColumns { n, rows, vals })
    }

    /// Identity factor of dimension `n`.
    pub fn identity(n: usize) -> Self {
        SparseLowerColumns {
            n,
            rows: (0..n).map(|i| vec![i]).collect(),
            vals: vec![vec![1.0]; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn col_rows(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn col_vals(&self, i: usize) -> &[f64] {
        &self.vals[i]
    }

    pub fn col_vals_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.vals[i]
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.vals[i][0]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// Dense `n × n` copy, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for j in 0..self.n {
            for (&r, &v) in self.rows[j].iter().zip(&self.vals[j]) {
                out[r * self.n + j] = v;
            }
        }
        out
    }
}

/// Solve `V_{A,A}·x = rhs_A` by forward substitution restricted to the
/// ordered active set `A`, returning `x` over `A`.
///
/// `rhs` is given as sparse `(index, value)` pairs with support inside `A`.
/// With `A = {0..n}` this performs exactly the unrestricted column-oriented
/// forward solve, in the same arithmetic order.
/// Position of `r` in the sorted active set, with an O(1) fast path when the
/// set is a contiguous index range (dense patterns).
#[derive(Clone, Copy)]
pub(crate) enum ActiveLookup {
    Contiguous { start: usize, len: usize },
    Sorted,
}

impl ActiveLookup {
    pub(crate) fn new(active: &[usize]) -> Self {
        match (active.first(), active.last()) {
            (Some(&a), Some(&b)) if b - a + 1 == active.len() => ActiveLookup::Contiguous {
                start: a,
                len: active.len(),
            },
            _ => ActiveLookup::Sorted,
        }
    }

    #[inline]
    pub(crate) fn find(&self, active: &[usize], r: usize) -> Option<usize> {
        match *self {
            ActiveLookup::Contiguous { start, len } => {
                if r >= start && r - start < len {
                    Some(r - start)
                } else {
                    None
                }
            }
            ActiveLookup::Sorted => active.binary_search(&r).ok(),
        }
    }
}

pub fn restricted_forward_solve(
    v: &SparseLowerColumns,
    active: &[usize],
    rhs: &[(usize, f64)],
) -> Result<Vec<f64>> {
    let lookup = ActiveLookup::new(active);
    let mut x = vec![0.0; active.len()];
    for &(idx, val) in rhs {
        let p = lookup
            .find(active, idx)
            .ok_or_else(|| Error::ShapeMismatch(format!("rhs index {idx} outside active set")))?;
        x[p] = val;
    }
    for p in 0..active.len() {
        let j = active[p];
        let d = v.diag(j);
        if d == 0.0 {
            return Err(Error::SingularDiagonal(j));
        }
        x[p] /= d;
        let xp = x[p];
        if xp != 0.0 {
            let rows = v.col_rows(j);
            let vals = v.col_vals(j);
            for (&r, &val) in rows.iter().zip(vals).skip(1) {
                if let Some(q) = lookup.find(active, r) {
                    x[q] -= val * xp;
                }
            }
        }
    }
    Ok(x)
}

/// Solve `V_{A,A}ᵀ·x = rhs_A` restricted to the ordered active set `A`.
///
/// This is the adjoint of `restricted_forward_solve` and is used when
/// back-propagating through restricted solves and in prediction means.
pub fn restricted_backward_solve(
    v: &SparseLowerColumns,
    active: &[usize],
    rhs: &[f64],
) -> Result<Vec<f64>> {
    if rhs.len() != active.len() {
        return Err(Error::ShapeMismatch(format!(
            "rhs length {} vs active set size {}",
            rhs.len(),
            active.len()
        )));
    }
    let lookup = ActiveLookup::new(active);
    let mut x = rhs.to_vec();
    for p in (0..active.len()).rev() {
        let j = active[p];
        let rows = v.col_rows(j);
        let vals = v.col_vals(j);
        let mut s = x[p];
        for (&r, &val) in rows.iter().zip(vals).skip(1) {
            if let Some(q) = lookup.find(active, r) {
                s -= val * x[q];
            }
        }
        let d = v.diag(j);
        if d == 0.0 {
            return Err(Error::SingularDiagonal(j));
        }
        x[p] = s / d;
    }
    Ok(x)
}
