//! Dense double-precision kernels.
//!
//! Matrices are row-major. `vec(M)` concatenates the rows of `M`, and
//! [`vec_mat`] is its inverse, so `vec(G Aᵀ)[p * n_a + q] = Σₖ G[p,k] A[q,k]`.
//! Every other module builds on these routines.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SengError};
use crate::par;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Borrowed row-major matrix; lets a flat vector be used as a matrix
/// without copying it.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl<'a> MatRef<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SengError::Parameter(format!(
                "view of {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_owned(&self) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.to_vec(),
        }
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SengError::Parameter(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SengError::Parameter("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(SengError::Parameter("ragged columns".into()));
        }
        let cols = columns.len();
        let mut m = Self::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                m.data[i * cols + j] = v;
            }
        }
        Ok(m)
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    /// Copies columns `start..end` into a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> DenseMatrix {
        let w = end - start;
        let mut out = DenseMatrix::zeros(self.rows, w);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.data[i * self.cols + start..i * self.cols + end]);
        }
        out
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        gemm(self.view(), other.view())
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        gemm_tn(self.view(), other.view())
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &DenseMatrix) -> DenseMatrix {
        gemm_nt(self.view(), other.view())
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · x`
    pub fn t_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "t_matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, self.row(i), &mut out);
            }
        }
        out
    }

    pub fn hadamard(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.shape(), other.shape(), "hadamard shape mismatch");
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> DenseMatrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// Adds `s` to every diagonal entry.
    pub fn add_diag(&mut self, s: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += s;
        }
    }

    /// `(X + Xᵀ) / 2`
    pub fn symmetrize(&mut self) {
        assert_eq!(self.rows, self.cols, "symmetrize needs a square matrix");
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = m;
                self.data[j * n + i] = m;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `A · B`, parallel over output rows for large products.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>) -> DenseMatrix {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    let work = a.rows * a.cols * b.cols;
    par::for_each_row(&mut out.data, b.cols, work, |i, row| {
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(aik, b.row(k), row);
            }
        }
    });
    out
}

/// `Aᵀ · B`
pub fn gemm_tn(a: MatRef<'_>, b: MatRef<'_>) -> DenseMatrix {
    assert_eq!(a.rows, b.rows, "gemm_tn inner dimension mismatch");
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    let work = a.rows * a.cols * b.cols;
    par::for_each_row(&mut out.data, b.cols, work, |i, row| {
        for k in 0..a.rows {
            let aki = a.at(k, i);
            if aki != 0.0 {
                axpy(aki, b.row(k), row);
            }
        }
    });
    out
}

/// `A · Bᵀ`
pub fn gemm_nt(a: MatRef<'_>, b: MatRef<'_>) -> DenseMatrix {
    assert_eq!(a.cols, b.cols, "gemm_nt inner dimension mismatch");
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    let work = a.rows * a.cols * b.rows;
    par::for_each_row(&mut out.data, b.rows, work, |i, row| {
        let ai = a.row(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = dot(ai, b.row(j));
        }
    });
    out
}

/// Sum of all entries.
pub fn elesum(x: &DenseMatrix) -> f64 {
    x.data.iter().sum()
}

/// Reshapes a length-`n_g * n_a` vector into an `n_g × n_a` matrix
/// (row-major, inverse of [`mat_vec`]).
pub fn vec_mat(z: &[f64], n_g: usize, n_a: usize) -> Result<DenseMatrix> {
    if z.len() != n_g * n_a {
        return Err(SengError::Parameter(format!(
            "cannot reshape length {} into {n_g}x{n_a}",
            z.len()
        )));
    }
    DenseMatrix::from_vec(n_g, n_a, z.to_vec())
}

/// Row-major vectorization.
pub fn mat_vec(m: &DenseMatrix) -> Vec<f64> {
    m.data.clone()
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows;
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let (done, rest) = l.data.split_at_mut(j * n);
        let row_j = &mut rest[..n];
        for i in 0..j {
            let row_i = &done[i * n..i * n + i];
            row_j[i] = (a[(j, i)] - dot(row_i, &row_j[..i])) / done[i * n + i];
        }
        let d = a[(j, j)] - dot(&row_j[..j], &row_j[..j]);
        if !(d > 0.0) || !d.is_finite() {
            return Err(SengError::NotPositiveDefinite { pivot: j });
        }
        row_j[j] = d.sqrt();
    }
    Ok(l)
}

/// Solves `A X = B` for symmetric positive-definite `A` through a Cholesky
/// factorization. `A` is never inverted.
pub fn spd_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows;
    if a.cols != n {
        return Err(SengError::Parameter(format!(
            "spd_solve needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if b.rows != n {
        return Err(SengError::Parameter(format!(
            "right-hand side has {} rows, expected {n}",
            b.rows
        )));
    }
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale {
                return Err(SengError::Parameter(format!(
                    "matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let l = cholesky(a)?;
    Ok(cholesky_substitute(&l, b.clone()))
}

/// Overwrites `x` with `(L Lᵀ)⁻¹ x`.
fn cholesky_substitute(l: &DenseMatrix, mut x: DenseMatrix) -> DenseMatrix {
    let n = l.rows;
    let k = x.cols;
    // forward: L y = b
    for i in 0..n {
        for c in 0..k {
            let mut s = x[(i, c)];
            for p in 0..i {
                s -= l[(i, p)] * x[(p, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    // backward: Lᵀ x = y
    for i in (0..n).rev() {
        for c in 0..k {
            let mut s = x[(i, c)];
            for p in (i + 1)..n {
                s -= l[(p, i)] * x[(p, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Vector convenience wrapper around [`spd_solve`].
pub fn spd_solve_vec(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let rhs = DenseMatrix::from_vec(b.len(), 1, b.to_vec())?;
    Ok(spd_solve(a, &rhs)?.into_vec())
}

/// Rank-`r` singular value decomposition `A ≈ U diag(S) Vᵀ`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `p × r`, orthonormal columns.
    pub u: DenseMatrix,
    /// Nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// `κ × r`, orthonormal columns.
    pub v: DenseMatrix,
}

impl Svd {
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for i in 0..us.rows {
            for (j, s) in self.s.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t(&self.v)
    }
}

/// Truncated SVD: Householder QR of the thin orientation followed by
/// one-sided Jacobi on the small triangular factor.
pub fn truncated_svd(a: &DenseMatrix, r: usize) -> Result<Svd> {
    let m = a.rows.min(a.cols);
    if r == 0 || r > m {
        return Err(SengError::Parameter(format!(
            "rank {r} out of range 1..={m} for a {}x{} matrix",
            a.rows, a.cols
        )));
    }
    let full = if a.rows >= a.cols {
        thin_svd(&columns_of(a))
    } else {
        // Aᵀ = U' S V'ᵀ  ⇒  A = V' S U'ᵀ
        let t = thin_svd(&rows_of(a));
        ThinSvd {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    Ok(Svd {
        u: take_columns(&full.u, r),
        s: full.s[..r].to_vec(),
        v: take_columns(&full.v, r),
    })
}

struct ThinSvd {
    u: Vec<Vec<f64>>,
    s: Vec<f64>,
    v: Vec<Vec<f64>>,
}

fn columns_of(a: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..a.cols).map(|j| a.column(j)).collect()
}

fn rows_of(a: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..a.rows).map(|i| a.row(i).to_vec()).collect()
}

fn take_columns(cols: &[Vec<f64>], r: usize) -> DenseMatrix {
    let rows = cols.first().map_or(0, Vec::len);
    let mut out = DenseMatrix::zeros(rows, r);
    for (j, c) in cols.iter().take(r).enumerate() {
        for (i, &v) in c.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

/// SVD of a tall matrix given by its `k` columns of length `m ≥ k`.
fn thin_svd(cols: &[Vec<f64>]) -> ThinSvd {
    let k = cols.len();
    let m = cols.first().map_or(0, Vec::len);
    debug_assert!(m >= k);

    // Householder QR, column-major working copy.
    let mut work: Vec<Vec<f64>> = cols.to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let x = &work[j][j..];
        let xnorm = norm(x);
        let mut v = x.to_vec();
        if xnorm > 0.0 {
            let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
            v[0] -= alpha;
            let vn = norm(&v);
            if vn > 0.0 {
                v.iter_mut().for_each(|e| *e /= vn);
            }
        } else {
            v.iter_mut().for_each(|e| *e = 0.0);
        }
        for col in work.iter_mut().skip(j) {
            let t = 2.0 * dot(&v, &col[j..]);
            if t != 0.0 {
                axpy(-t, &v, &mut col[j..]);
            }
        }
        reflectors.push(v);
    }
    // R as k columns of length k.
    let mut w: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..k).map(|i| if i <= j { work[j][i] } else { 0.0 }).collect())
        .collect();
    let mut vmat: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..k).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    one_sided_jacobi(&mut w, &mut vmat);

    let s: Vec<f64> = w.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let smax = order.first().map_or(0.0, |&i| s[i]);
    let tol = smax * (k.max(1) as f64) * f64::EPSILON;

    let mut ur: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut v_sorted: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut s_sorted = Vec::with_capacity(k);
    let mut deficient = Vec::new();
    for &idx in &order {
        let sigma = s[idx];
        if sigma > tol && sigma > 0.0 {
            ur.push(w[idx].iter().map(|e| e / sigma).collect());
            s_sorted.push(sigma);
        } else {
            deficient.push(ur.len());
            ur.push(vec![0.0; k]);
            s_sorted.push(0.0);
        }
        v_sorted.push(vmat[idx].clone());
    }
    complete_orthonormal(&mut ur, &deficient);

    // U = Q [U_R; 0]
    let mut u: Vec<Vec<f64>> = ur
        .into_iter()
        .map(|c| {
            let mut full = c;
            full.resize(m, 0.0);
            full
        })
        .collect();
    for j in (0..k).rev() {
        let v = &reflectors[j];
        for col in u.iter_mut() {
            let t = 2.0 * dot(v, &col[j..]);
            if t != 0.0 {
                axpy(-t, v, &mut col[j..]);
            }
        }
    }
    ThinSvd {
        u,
        s: s_sorted,
        v: v_sorted,
    }
}

/// Hestenes one-sided Jacobi: rotates the columns of `w` until they are
/// mutually orthogonal, accumulating the rotations in `v`.
fn one_sided_jacobi(w: &mut [Vec<f64>], v: &mut [Vec<f64>]) {
    let k = w.len();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(w, p, q, c, s);
                rotate_pair(v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Replaces the listed (zero) columns with unit vectors orthogonal to all
/// other columns.
fn complete_orthonormal(cols: &mut [Vec<f64>], slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let dim = cols.first().map_or(0, Vec::len);
    let mut candidate = 0;
    for &slot in slots {
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == slot || (slots.contains(&j) && norm(c) == 0.0) {
                        continue;
                    }
                    let proj = dot(c, &e);
                    axpy(-proj, c, &mut e);
                }
            }
            let en = norm(&e);
            if en > 1e-8 {
                e.iter_mut().for_each(|x| *x /= en);
                cols[slot] = e;
                break;
            }
        }
    }
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `j` is the eigenvector of `values[j]`.
    pub vectors: DenseMatrix,
}

/// Cyclic Jacobi eigenvalue iteration for symmetric matrices.
pub fn sym_eigen(a: &DenseMatrix) -> Result<SymEigen> {
    let n = a.rows;
    if a.cols != n {
        return Err(SengError::Parameter("sym_eigen needs a square matrix".into()));
    }
    let mut m = a.clone();
    m.symmetrize();
    let mut v = DenseMatrix::identity(n);
    let total = m.frobenius_norm();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok(SymEigen { values, vectors })
}

/// Largest absolute eigenvalue of a symmetric matrix (its spectral norm).
pub fn sym_spectral_norm(a: &DenseMatrix) -> Result<f64> {
    let e = sym_eigen(a)?;
    Ok(e.values.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Gauss-Jordan inverse with partial pivoting.
    fn gauss_jordan_inverse(a: &DenseMatrix) -> DenseMatrix {
        let n = a.rows();
        let mut aug = DenseMatrix::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = a[(i, j)];
            }
            aug[(i, n + i)] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| aug[(x, col)].abs().total_cmp(&aug[(y, col)].abs()))
                .unwrap();
            for j in 0..2 * n {
                let t = aug[(col, j)];
                aug[(col, j)] = aug[(piv, j)];
                aug[(piv, j)] = t;
            }
            let d = aug[(col, col)];
            for j in 0..2 * n {
                aug[(col, j)] /= d;
            }
            for i in 0..n {
                if i != col {
                    let f = aug[(i, col)];
                    for j in 0..2 * n {
                        aug[(i, j)] -= f * aug[(col, j)];
                    }
                }
            }
        }
        DenseMatrix::from_fn(n, n, |i, j| aug[(i, n + j)])
    }

    #[test]
    fn spd_solve_identity_and_diagonal() {
        let b = DenseMatrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let x = spd_solve(&DenseMatrix::identity(2), &b).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0]);

        let a = DenseMatrix::diag(&[2.0, 4.0]);
        let b = DenseMatrix::from_vec(2, 1, vec![2.0, 8.0]).unwrap();
        let x = spd_solve(&a, &b).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((x[(1, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn spd_solve_matches_dense_inverse() {
        let x = random(8, 8, 3);
        let mut a = x.t_matmul(&x);
        a.add_diag(0.5);
        let b = random(8, 3, 4);
        let got = spd_solve(&a, &b).unwrap();
        let want = gauss_jordan_inverse(&a).matmul(&b);
        let err = got.sub(&want).max_abs();
        assert!(err < 1e-10, "err {err}");
        let resid = a.matmul(&got).sub(&b).frobenius_norm() / b.frobenius_norm();
        assert!(resid < 1e-10);
    }

    #[test]
    fn spd_solve_reports_failing_pivot() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let b = DenseMatrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(
            spd_solve(&a, &b).unwrap_err(),
            SengError::NotPositiveDefinite { pivot: 1 }
        );
        let neg = DenseMatrix::diag(&[-1.0, 1.0]);
        assert_eq!(
            spd_solve(&neg, &b).unwrap_err(),
            SengError::NotPositiveDefinite { pivot: 0 }
        );
    }

    #[test]
    fn spd_solve_rejects_asymmetric() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        let b = DenseMatrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(matches!(spd_solve(&a, &b), Err(SengError::Parameter(_))));
    }

    #[test]
    fn svd_of_diagonal() {
        let a = DenseMatrix::diag(&[3.0, 2.0, 1.0]);
        let svd = truncated_svd(&a, 2).unwrap();
        assert!((svd.s[0] - 3.0).abs() < 1e-14);
        assert!((svd.s[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn svd_rank_one_exact() {
        let x = [1.0, -2.0, 0.5, 3.0];
        let y = [2.0, 1.0, -1.0];
        let a = DenseMatrix::from_fn(4, 3, |i, j| x[i] * y[j]);
        let svd = truncated_svd(&a, 1).unwrap();
        assert!(svd.reconstruct().sub(&a).frobenius_norm() <= 1e-10);
    }

    #[test]
    fn svd_tail_matches_gram_eigen_oracle() {
        let a = random(10, 6, 11);
        let svd = truncated_svd(&a, 3).unwrap();
        // oracle: singular values from the eigenvalues of AᵀA
        let eig = sym_eigen(&a.t_matmul(&a)).unwrap();
        let mut sv: Vec<f64> = eig.values.iter().map(|v| v.max(0.0).sqrt()).collect();
        sv.sort_by(|x, y| y.total_cmp(x));
        let tail: f64 = sv[3..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let err = svd.reconstruct().sub(&a).frobenius_norm();
        assert!((err - tail).abs() < 1e-8, "err {err} tail {tail}");
        for (got, want) in svd.s.iter().zip(&sv) {
            assert!((got - want).abs() < 1e-8);
        }
    }

    #[test]
    fn svd_orthonormal_and_sorted_wide_and_tall() {
        for &(p, k) in &[(12, 5), (5, 12), (7, 7), (64, 3)] {
            let a = random(p, k, (p * 100 + k) as u64);
            let m = p.min(k);
            let svd = truncated_svd(&a, m).unwrap();
            let utu = svd.u.t_matmul(&svd.u);
            let vtv = svd.v.t_matmul(&svd.v);
            assert!(utu.sub(&DenseMatrix::identity(m)).max_abs() < 1e-8);
            assert!(vtv.sub(&DenseMatrix::identity(m)).max_abs() < 1e-8);
            assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(svd.s.iter().all(|&s| s >= 0.0));
            let rel = svd.reconstruct().sub(&a).frobenius_norm() / a.frobenius_norm();
            assert!(rel < 1e-8, "({p},{k}) rel {rel}");
        }
    }

    #[test]
    fn svd_rank_deficient_still_orthonormal() {
        let a = DenseMatrix::zeros(6, 3);
        let svd = truncated_svd(&a, 3).unwrap();
        assert!(svd.s.iter().all(|&s| s == 0.0));
        let utu = svd.u.t_matmul(&svd.u);
        assert!(utu.sub(&DenseMatrix::identity(3)).max_abs() < 1e-8);
    }

    #[test]
    fn svd_rank_out_of_range() {
        let a = random(4, 3, 1);
        assert!(matches!(truncated_svd(&a, 0), Err(SengError::Parameter(_))));
        assert!(matches!(truncated_svd(&a, 4), Err(SengError::Parameter(_))));
    }

    #[test]
    fn elesum_cases() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(elesum(&m), 10.0);
        assert_eq!(elesum(&DenseMatrix::zeros(3, 4)), 0.0);
        let a = [1.0, 2.0, -0.5];
        let b = [4.0, 0.25];
        let outer = DenseMatrix::from_fn(3, 2, |i, j| a[i] * b[j]);
        let want: f64 = a.iter().sum::<f64>() * b.iter().sum::<f64>();
        assert!((elesum(&outer) - want).abs() < 1e-14);
    }

    #[test]
    fn vec_mat_round_trips() {
        let z = vec![1.0, 2.0, 3.0, 4.0];
        let m = vec_mat(&z, 2, 2).unwrap();
        assert_eq!(mat_vec(&m), z);
        assert!(vec_mat(&z, 3, 2).is_err());

        let g = DenseMatrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let a = DenseMatrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let gat = g.matmul_t(&a);
        assert_eq!(vec_mat(&mat_vec(&gat), 2, 2).unwrap(), gat);
    }

    #[test]
    fn ut_z_hadamard_identity() {
        // uᵀz == elesum((Ĝᵀ mat(z)) ⊙ Âᵀ) for u = vec(Ĝ Âᵀ)
        let g = random(3, 2, 21);
        let a = random(4, 2, 22);
        let z: Vec<f64> = random(12, 1, 23).into_vec();
        let u = mat_vec(&g.matmul_t(&a));
        let zm = vec_mat(&z, 3, 4).unwrap();
        let lhs = elesum(&g.t_matmul(&zm).hadamard(&a.transpose()));
        assert!((lhs - dot(&u, &z)).abs() < 1e-12);
    }

    #[test]
    fn kronecker_inner_product() {
        let a = random(3, 1, 1).into_vec();
        let a2 = random(3, 1, 2).into_vec();
        let g = random(4, 1, 3).into_vec();
        let g2 = random(4, 1, 4).into_vec();
        let kron = |x: &[f64], y: &[f64]| -> Vec<f64> {
            x.iter().flat_map(|xi| y.iter().map(move |yi| xi * yi)).collect()
        };
        let lhs = dot(&kron(&a, &g), &kron(&a2, &g2));
        assert!((lhs - dot(&a, &a2) * dot(&g, &g2)).abs() < 1e-12);
    }

    #[test]
    fn sym_eigen_reconstructs() {
        let x = random(6, 6, 9);
        let a = x.add(&x.transpose());
        let e = sym_eigen(&a).unwrap();
        let vd = DenseMatrix::from_fn(6, 6, |i, j| e.vectors[(i, j)] * e.values[j]);
        let back = vd.matmul_t(&e.vectors);
        assert!(back.sub(&a).max_abs() < 1e-10);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn gemm_variants_agree() {
        let a = random(5, 7, 1);
        let b = random(7, 4, 2);
        let ab = a.matmul(&b);
        let via_tn = a.transpose().t_matmul(&b);
        let via_nt = a.matmul_t(&b.transpose());
        assert!(ab.sub(&via_tn).max_abs() < 1e-14);
        assert!(ab.sub(&via_nt).max_abs() < 1e-14);
        let x = random(7, 1, 3).into_vec();
        let y = a.matvec(&x);
        let y2 = a.matmul(&DenseMatrix::from_vec(7, 1, x.clone()).unwrap());
        assert!(y.iter().zip(y2.data()).all(|(p, q)| (p - q).abs() < 1e-14));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn vec_mat_bijection(n_g in 1usize..6, n_a in 1usize..6, seed in 0u64..1000) {
                let z = random(n_g * n_a, 1, seed).into_vec();
                let m = vec_mat(&z, n_g, n_a).unwrap();
                prop_assert_eq!(mat_vec(&m), z);
                let m2 = vec_mat(&mat_vec(&m), n_g, n_a).unwrap();
                prop_assert_eq!(m2, m);
            }

            #[test]
            fn spd_residual_small(n in 1usize..10, seed in 0u64..1000, lam in 1e-3f64..10.0) {
                let x = random(n + 2, n, seed);
                let mut a = x.t_matmul(&x);
                a.add_diag(lam);
                let b = random(n, 2, seed + 1);
                let sol = spd_solve(&a, &b).unwrap();
                let r = a.matmul(&sol).sub(&b).frobenius_norm() / b.frobenius_norm().max(1e-300);
                prop_assert!(r <= 1e-10);
            }

            #[test]
            fn full_rank_svd_reconstructs(p in 1usize..9, k in 1usize..9, seed in 0u64..1000) {
                let a = random(p, k, seed);
                let svd = truncated_svd(&a, p.min(k)).unwrap();
                let rel = svd.reconstruct().sub(&a).frobenius_norm() / a.frobenius_norm();
                prop_assert!(rel <= 1e-8);
            }
        }
    }
}
