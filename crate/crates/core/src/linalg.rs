//! Dense matrix kernels, a thin SVD and the Frobenius-energy rank rule.
//!
//! Gradient sets are stored columns-as-gradients: a buffer of `n` gradients of
//! dimension `w` is the `w x n` matrix whose `j`-th column is the `j`-th gradient.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// Singular values below `NUMERIC_FLOOR * |G|_F` are treated as exactly zero.
pub const NUMERIC_FLOOR: f64 = 1e-12;
/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;
/// A column pair counts as orthogonal once `|<a,b>| / (|a| |b|)` drops below this.
pub const JACOBI_TOL: f64 = 1e-14;

/// Row-major dense matrix with finite entries and at least one row and column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        ensure_len("Matrix::new", rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix must be at least 1x1");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::Empty("Matrix::from_diag"));
        }
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        Self::new(m.rows, m.cols, m.data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("Matrix::from_rows"))?;
        let cols = first.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ensure_len("Matrix::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds the matrix whose `j`-th column is `columns[j]`.
    pub fn from_columns<C: AsRef<[f64]>>(columns: &[C]) -> Result<Self> {
        let first = columns.first().ok_or(Error::Empty("Matrix::from_columns"))?;
        let rows = first.as_ref().len();
        let cols = columns.len();
        let mut data = vec![0.0; rows * cols];
        for (j, c) in columns.iter().enumerate() {
            let c = c.as_ref();
            ensure_len("Matrix::from_columns", rows, c.len())?;
            for (i, &v) in c.iter().enumerate() {
                data[i * cols + j] = v;
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        ensure_len("matmul", self.cols, rhs.rows)?;
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `A x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_len("matvec", self.cols, x.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `A^T x` without materialising the transpose.
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_len("tr_matvec", self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        ensure_len("max_abs_diff(rows)", self.rows, other.rows)?;
        ensure_len("max_abs_diff(cols)", self.cols, other.cols)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn frobenius_norm_sq(g: &Matrix) -> f64 {
    g.data.iter().map(|v| v * v).sum()
}

/// Thin SVD `G = U diag(sigma) V^T` with `k = min(rows, cols)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    /// `rows x k`, orthonormal columns.
    pub u: Matrix,
    /// Length `k`, non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `cols x k`, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows {
            for (j, s) in self.sigma.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul(&self.v.transpose())
            .expect("svd factors have compatible shapes")
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi.
///
/// Rotating column pairs of `G` until they are mutually orthogonal is the
/// cyclic Jacobi eigen-iteration on `G^T G` carried out implicitly, so the
/// cost stays `O(w n^2)` per sweep for the thin `w x n` gradient matrices used
/// here while keeping singular values relatively accurate. Wide inputs are
/// handled through their transpose.
///
/// Signs are canonical: the first nonzero entry of every column of `U` is
/// nonnegative.
pub fn svd(g: &Matrix) -> Result<SvdResult> {
    if g.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd"));
    }
    let (mut u, sigma, mut v) = if g.rows >= g.cols {
        jacobi_tall(g)?
    } else {
        let (u_t, s, v_t) = jacobi_tall(&g.transpose())?;
        (v_t, s, u_t)
    };
    for j in 0..sigma.len() {
        let first = (0..u.rows).map(|i| u[(i, j)]).find(|x| *x != 0.0);
        if matches!(first, Some(x) if x < 0.0) {
            for i in 0..u.rows {
                u[(i, j)] = -u[(i, j)];
            }
            for i in 0..v.rows {
                v[(i, j)] = -v[(i, j)];
            }
        }
    }
    Ok(SvdResult { u, sigma, v })
}

fn jacobi_tall(g: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = (g.rows, g.cols);
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| g.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    // columns this small are numerically zero; rotating them only chases noise
    let floor = NUMERIC_FLOOR * a.iter().map(|c| dot(c, c)).sum::<f64>().sqrt();
    let tiny = floor * floor;
    let mut converged = false;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        residual = 0.0_f64;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha <= tiny || beta <= tiny || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= JACOBI_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = a.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps ties in column order, which keeps the result deterministic
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let sigma_max = norms[order[0]];

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut missing = 0;
    for &j in &order {
        let s = norms[j];
        if sigma_max > 0.0 && s > floor {
            u_cols.push(a[j].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            missing += 1;
            sigma.push(0.0);
        }
        v_cols.push(v[j].clone());
    }
    for _ in 0..missing {
        let col = complete_basis(&u_cols, m);
        u_cols.push(col);
    }

    Ok((
        Matrix::from_columns(&u_cols)?,
        sigma,
        Matrix::from_columns(&v_cols)?,
    ))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Unit vector orthogonal to every column in `basis`, taken from the
/// coordinate axis with the largest residual after two Gram-Schmidt passes.
fn complete_basis(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 0..dim {
        let mut e = vec![0.0; dim];
        e[k] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(b, &e);
                axpy(-proj, b, &mut e);
            }
        }
        let r = norm(&e);
        if best.as_ref().is_none_or(|(br, _)| r > *br) {
            best = Some((r, e));
        }
    }
    let (r, mut e) = best.expect("dim >= 1");
    for x in &mut e {
        *x /= r;
    }
    e
}

/// Smallest `r` with `sum_{i<=r} sigma_i^2 >= tau * sum_i sigma_i^2`.
///
/// The left side is the squared Frobenius norm of the rank-`r` truncation.
pub fn select_rank(sigma: &[f64], tau: f64) -> Result<usize> {
    if sigma.is_empty() {
        return Err(Error::Empty("select_rank"));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidInput(format!("tau must lie in (0, 1], got {tau}")));
    }
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidInput(
            "singular values must be finite and nonnegative".into(),
        ));
    }
    if sigma.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidInput(
            "singular values must be sorted in descending order".into(),
        ));
    }
    let energy = |r: usize| -> f64 { sigma[..r].iter().map(|s| s * s).sum() };
    let total = energy(sigma.len());
    if total == 0.0 {
        return Err(Error::Degenerate("all singular values are zero".into()));
    }
    let target = tau * total;
    Ok((1..=sigma.len())
        .find(|&r| energy(r) >= target)
        .unwrap_or(sigma.len()))
}

/// Fraction of the squared Frobenius energy kept by the leading `r` values.
pub fn energy_ratio(sigma: &[f64], r: usize) -> f64 {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let kept: f64 = sigma[..r].iter().map(|s| s * s).sum();
    kept / total
}
