//! Dense row-major matrices and the handful of deterministic kernels the
//! decomposition and analysis code needs: Householder QR, cyclic Jacobi
//! eigendecomposition, one-sided Jacobi SVD and a Cholesky-backed ridge
//! inverse.
//!
//! Sign conventions are part of the contract: `R` from [`qr_thin`] has a
//! nonnegative diagonal, and every eigenvector / right singular vector has
//! its largest-magnitude component positive (ties go to the lowest index).

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry in input")]
    NonFinite,
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e}, tolerance {tolerance:e})")]
    Asymmetric { asymmetry: f64, tolerance: f64 },
    #[error("ridge parameter must be positive, got {0}")]
    NonPositiveRidge(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("{0} did not converge within {1} sweeps")]
    NoConvergence(&'static str, usize),
}

pub type Result<T, E = LinalgError> = std::result::Result<T, E>;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Matrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        for (r, &v) in values.iter().enumerate() {
            self[(r, c)] = v;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn col_block(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |r, c| self[(r, start + c)])
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul {}x{} by {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul row mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec length mismatch");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, y.len(), "t_matvec length mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Multiplies column `k` by `d[k]`, i.e. `self · diag(d)`.
    pub fn scale_columns(&self, d: &[f64]) -> Matrix {
        assert_eq!(d.len(), self.cols);
        Matrix::from_fn(self.rows, self.cols, |r, c| self[(r, c)] * d[c])
    }

    /// Multiplies row `k` by `d[k]`, i.e. `diag(d) · self`.
    pub fn scale_rows(&self, d: &[f64]) -> Matrix {
        assert_eq!(d.len(), self.rows);
        Matrix::from_fn(self.rows, self.cols, |r, c| self[(r, c)] * d[r])
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product `tr(selfᵀ other)`.
    pub fn frobenius_dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        dot(&self.data, &other.data)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Largest entry of `|A - Aᵀ|`. Non-square matrices report infinity.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        assert_eq!(self.rows, self.cols);
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self[(i, j)] + self[(j, i)])
        })
    }

    /// Vertical concatenation.
    pub fn vstack(blocks: &[Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        if blocks.iter().any(|b| b.cols != cols) {
            return Err(LinalgError::Dimension(
                "vstack blocks have different column counts".into(),
            ));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Ok(Matrix { rows, cols, data })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn ensure_finite(a: &Matrix) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

/// Thin Householder QR of a tall matrix: `A = Q R` with `Q` `rows × cols`
/// orthonormal and `R` `cols × cols` upper triangular with a nonnegative
/// diagonal.
pub fn qr_thin(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = a.shape();
    if m < n {
        return Err(LinalgError::Dimension(format!(
            "thin QR needs rows >= cols, got {m}x{n}"
        )));
    }
    ensure_finite(a)?;

    let mut work = a.clone();
    // Householder vectors, stored unnormalized with the convention
    // H = I - 2 v vᵀ / (vᵀ v); a zero vector means "no reflection".
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let x: Vec<f64> = (k..m).map(|r| work[(r, k)]).collect();
        let alpha = norm2(&x);
        let mut v = x;
        if alpha == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        // Reflect onto -sign(x0)·alpha·e1 to avoid cancellation.
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vtv = dot(&v, &v);
        for c in k..n {
            let mut s = 0.0;
            for (i, vi) in v.iter().enumerate() {
                s += vi * work[(k + i, c)];
            }
            let f = 2.0 * s / vtv;
            for (i, vi) in v.iter().enumerate() {
                work[(k + i, c)] -= f * vi;
            }
        }
        // Exact zeros below the diagonal.
        for r in (k + 1)..m {
            work[(r, k)] = 0.0;
        }
        reflectors.push(v);
    }

    let mut r = Matrix::from_fn(n, n, |i, j| if j >= i { work[(i, j)] } else { 0.0 });

    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q = Matrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..n).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        let vtv = dot(v, v);
        for c in 0..n {
            let mut s = 0.0;
            for (i, vi) in v.iter().enumerate() {
                s += vi * q[(k + i, c)];
            }
            if s == 0.0 {
                continue;
            }
            let f = 2.0 * s / vtv;
            for (i, vi) in v.iter().enumerate() {
                q[(k + i, c)] -= f * vi;
            }
        }
    }

    for k in 0..n {
        if r[(k, k)] < 0.0 {
            for c in k..n {
                r[(k, c)] = -r[(k, c)];
            }
            for row in 0..m {
                q[(row, k)] = -q[(row, k)];
            }
        }
    }
    Ok((q, r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigResult {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, aligned with `values`.
    pub vectors: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Flips `v` so its largest-magnitude component is positive. Components
/// within 1e-12 of the maximum count as ties and the lowest index wins.
fn canonical_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    let lead = v
        .iter()
        .position(|x| x.abs() >= max - 1e-12 * max)
        .expect("max is attained");
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps stop once the off-diagonal Frobenius mass drops below
/// `1e-14·‖A‖_F`, or fail after 100 sweeps.
pub fn eigh_symmetric(a: &Matrix) -> Result<EigResult> {
    let n = a.rows();
    if a.cols() != n {
        return Err(LinalgError::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    ensure_finite(a)?;
    let tolerance = 1e-10 * a.max_abs();
    let asymmetry = a.asymmetry();
    if asymmetry > tolerance {
        return Err(LinalgError::Asymmetric {
            asymmetry,
            tolerance,
        });
    }

    let mut w = a.symmetrized();
    let mut v = Matrix::identity(n);
    let threshold = 1e-14 * w.frobenius();

    let off_norm = |w: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * w[(i, j)] * w[(i, j)];
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&w) <= threshold;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence("Jacobi eigensolver", sweeps));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = w[(p, p)];
                let aqq = w[(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // W <- Jᵀ W J with J the (p, q) rotation [[c, s], [-s, c]].
                for k in 0..n {
                    let wkp = w[(k, p)];
                    let wkq = w[(k, q)];
                    w[(k, p)] = c * wkp - s * wkq;
                    w[(k, q)] = s * wkp + c * wkq;
                }
                for k in 0..n {
                    let wpk = w[(p, k)];
                    let wqk = w[(q, k)];
                    w[(p, k)] = c * wpk - s * wqk;
                    w[(q, k)] = s * wpk + c * wqk;
                }
                w[(p, q)] = 0.0;
                w[(q, p)] = 0.0;

                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&w) <= threshold;
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal eigenvalues keep their Jacobi order.
    order.sort_by(|&i, &j| w[(j, j)].total_cmp(&w[(i, i)]));
    let values = order.iter().map(|&i| w[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        canonical_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok(EigResult { values, vectors })
}

/// Thin singular value decomposition `A = U diag(S) Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// `rows × k` with orthonormal columns, `k = min(rows, cols)`.
    pub u: Matrix,
    /// Descending, nonnegative, length `k`.
    pub s: Vec<f64>,
    /// `cols × k` with orthonormal columns.
    pub v: Matrix,
}

/// One-sided (Hestenes) Jacobi SVD of a tall matrix. Returns the rotated
/// columns `A·V` and the accumulated `V`.
fn hestenes(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    // Work column-major so each rotation touches two contiguous slices.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = 1e-15;
    // Columns this small are rounding noise of a rank-deficient input;
    // rotating them against each other never settles.
    let negligible = (m as f64 * f64::EPSILON * a.frobenius()).powi(2);
    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                let (left, right) = v.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
        sweeps += 1;
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence("one-sided Jacobi SVD", sweeps));
        }
    }
    let av = Matrix::from_fn(m, n, |r, c| cols[c][r]);
    let vm = Matrix::from_fn(n, n, |r, c| v[c][r]);
    Ok((av, vm))
}

/// Thin SVD with the right-vector sign convention of [`eigh_symmetric`].
pub fn svd_thin(a: &Matrix) -> Result<Svd> {
    ensure_finite(a)?;
    let (m, n) = a.shape();
    let wide = m < n;
    let tall = if wide { a.transpose() } else { a.clone() };
    let (rows, k) = tall.shape();
    let (av, vm) = hestenes(&tall)?;

    let norms: Vec<f64> = (0..k).map(|c| norm2(&av.column(c))).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let s: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    // Matches the cutoff below which the Jacobi sweep leaves columns alone;
    // such columns get a completed orthonormal U column instead.
    let negligible = 2.0 * rows as f64 * f64::EPSILON * tall.frobenius();

    let mut left = Matrix::zeros(rows, k);
    let mut right = Matrix::zeros(k, k);
    let mut filled: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let col = if s[dst] > negligible {
            av.column(src).iter().map(|x| x / s[dst]).collect()
        } else {
            complete_orthonormal(&filled, rows)
        };
        left.set_column(dst, &col);
        right.set_column(dst, &vm.column(src));
        filled.push(col);
    }

    // For a wide input the roles swap: A = (Aᵀ)ᵀ = V' S U'ᵀ.
    let (mut u, mut v) = if wide { (right, left) } else { (left, right) };
    for c in 0..k {
        let mut col = v.column(c);
        let before = col.clone();
        canonical_sign(&mut col);
        if col != before {
            v.set_column(c, &col);
            let flipped: Vec<f64> = u.column(c).iter().map(|x| -x).collect();
            u.set_column(c, &flipped);
        }
    }
    debug_assert_eq!(u.rows(), m);
    debug_assert_eq!(v.rows(), n);
    Ok(Svd { u, s, v })
}

/// A unit vector orthogonal to every vector in `basis` (which must be
/// orthonormal and have fewer than `dim` members).
fn complete_orthonormal(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..dim {
        let mut cand: Vec<f64> = (0..dim).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                cand.iter_mut().zip(b).for_each(|(c, bi)| *c -= proj * bi);
            }
        }
        let nrm = norm2(&cand);
        if nrm > best_norm + 1e-12 {
            best_norm = nrm;
            best = Some(cand);
        }
        if best_norm > 0.7 {
            break;
        }
    }
    let v = best.expect("basis is not complete");
    v.iter().map(|x| x / best_norm).collect()
}

/// Singular values, descending, length `min(rows, cols)`.
pub fn svd_values(a: &Matrix) -> Result<Vec<f64>> {
    Ok(svd_thin(a)?.s)
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    Ok(svd_values(a)?.first().copied().unwrap_or(0.0))
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite);
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// `(G + πI)⁻¹` for symmetric positive semidefinite `G`.
pub fn ridge_inverse(g: &Matrix, pi: f64) -> Result<Matrix> {
    if !(pi > 0.0) || !pi.is_finite() {
        return Err(LinalgError::NonPositiveRidge(pi));
    }
    let n = g.rows();
    if g.cols() != n {
        return Err(LinalgError::Dimension(
            "ridge inverse needs a square matrix".into(),
        ));
    }
    ensure_finite(g)?;
    let tolerance = 1e-10 * g.max_abs().max(f64::MIN_POSITIVE);
    let asymmetry = g.asymmetry();
    if asymmetry > tolerance {
        return Err(LinalgError::Asymmetric {
            asymmetry,
            tolerance,
        });
    }
    let mut shifted = g.symmetrized();
    for i in 0..n {
        shifted[(i, i)] += pi;
    }
    let l = cholesky(&shifted)?;

    // Solve L Lᵀ X = I column by column.
    let mut inv = Matrix::zeros(n, n);
    let mut y = vec![0.0; n];
    for c in 0..n {
        for i in 0..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * inv[(k, c)];
            }
            inv[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(inv.symmetrized())
}

/// Numerical rank: count of singular values above `rel_tol · σ_max`.
pub fn numerical_rank(a: &Matrix, rel_tol: f64) -> Result<usize> {
    let s = svd_values(a)?;
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > rel_tol * smax).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = SplitMix64::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    fn orthonormality_error(q: &Matrix) -> f64 {
        q.t_matmul(q).max_abs_diff(&Matrix::identity(q.cols()))
    }

    #[test]
    fn qr_of_orthonormal_columns_is_identity_r() {
        let a = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let (q, r) = qr_thin(&a).unwrap();
        assert!(q.max_abs_diff(&a) < 1e-15);
        assert!(r.max_abs_diff(&Matrix::identity(2)) < 1e-15);
    }

    #[test]
    fn qr_of_three_four_column() {
        let a = Matrix::from_rows(&[&[3.0], &[4.0]]);
        let (q, r) = qr_thin(&a).unwrap();
        assert!((q[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((q[(1, 0)] - 0.8).abs() < 1e-15);
        assert!((r[(0, 0)] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn qr_rank_deficient_still_reconstructs() {
        let a = Matrix::from_rows(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
        let (q, r) = qr_thin(&a).unwrap();
        assert!(r[(1, 1)].abs() < 1e-12, "{r:?}");
        assert!(q.matmul(&r).max_abs_diff(&a) < 1e-12 * a.max_abs());
        assert!(r.diagonal().iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn qr_rejects_wide_and_nonfinite() {
        assert!(matches!(
            qr_thin(&Matrix::zeros(2, 3)),
            Err(LinalgError::Dimension(_))
        ));
        let mut a = Matrix::zeros(3, 2);
        a[(1, 1)] = f64::NAN;
        assert_eq!(qr_thin(&a), Err(LinalgError::NonFinite));
    }

    #[test]
    fn qr_random_residuals() {
        for seed in 0..10 {
            let a = random(12, 5, seed);
            let (q, r) = qr_thin(&a).unwrap();
            assert!(q.matmul(&r).max_abs_diff(&a) <= 1e-12 * a.max_abs());
            assert!(orthonormality_error(&q) <= 1e-12);
            for i in 0..5 {
                assert!(r[(i, i)] >= 0.0);
                for j in 0..i {
                    assert_eq!(r[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn eigh_diagonal_and_identity() {
        let e = eigh_symmetric(&Matrix::from_diag(&[2.0, 1.0])).unwrap();
        assert_eq!(e.values, vec![2.0, 1.0]);
        assert_eq!(e.vectors, Matrix::identity(2));

        let e = eigh_symmetric(&Matrix::identity(5)).unwrap();
        assert!(e.values.iter().all(|&v| v == 1.0));
        assert_eq!(e.vectors, Matrix::identity(5));
    }

    #[test]
    fn eigh_swap_matrix_closed_form() {
        let e = eigh_symmetric(&Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.values[0] - 1.0).abs() < 1e-15);
        assert!((e.values[1] + 1.0).abs() < 1e-15);
        let expected = Matrix::from_rows(&[&[h, h], &[h, -h]]);
        assert!(e.vectors.max_abs_diff(&expected) < 1e-15, "{:?}", e.vectors);
    }

    #[test]
    fn eigh_rejects_asymmetric() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(
            eigh_symmetric(&a),
            Err(LinalgError::Asymmetric { .. })
        ));
    }

    #[test]
    fn eigh_random_invariants() {
        for seed in 0..8 {
            let b = random(9, 9, seed);
            let a = b.add(&b.transpose());
            let e = eigh_symmetric(&a).unwrap();
            assert!(orthonormality_error(&e.vectors) <= 1e-10);
            for k in 0..9 {
                let z = e.vectors.column(k);
                let az = a.matvec(&z);
                for (x, y) in az.iter().zip(&z) {
                    assert!((x - e.values[k] * y).abs() <= 1e-8 * a.max_abs());
                }
            }
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn eigh_is_bitwise_deterministic() {
        let b = random(7, 7, 42);
        let a = b.t_matmul(&b);
        assert_eq!(eigh_symmetric(&a).unwrap(), eigh_symmetric(&a).unwrap());
    }

    #[test]
    fn svd_values_small_cases() {
        assert_eq!(
            svd_values(&Matrix::from_diag(&[3.0, 1.0])).unwrap(),
            vec![3.0, 1.0]
        );
        let s = svd_values(&Matrix::from_rows(&[&[3.0, 0.1], &[0.0, 1.0]])).unwrap();
        // Eigenvalues of AᵀA: trace 10.01, det 9.
        let disc = (10.01f64 * 10.01 - 36.0).sqrt();
        let expect = [((10.01 + disc) / 2.0).sqrt(), ((10.01 - disc) / 2.0).sqrt()];
        assert!((s[0] - expect[0]).abs() < 1e-12 && (s[1] - expect[1]).abs() < 1e-12);
        assert!((s[0] - 3.001874).abs() < 1e-6 && (s[1] - 0.999375).abs() < 1e-6);
        assert_eq!(svd_values(&Matrix::zeros(3, 2)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn svd_thin_diag_uses_identity_factors() {
        let svd = svd_thin(&Matrix::from_diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(svd.s, vec![3.0, 2.0, 1.0]);
        assert_eq!(svd.u, Matrix::identity(3));
        assert_eq!(svd.v, Matrix::identity(3));
    }

    #[test]
    fn svd_thin_random_reconstruction() {
        for (seed, (m, n)) in [(5, 3), (3, 5), (8, 8), (12, 4)].into_iter().enumerate() {
            let a = random(m, n, seed as u64 + 100);
            let svd = svd_thin(&a).unwrap();
            let rebuilt = svd.u.scale_columns(&svd.s).matmul(&svd.v.transpose());
            assert!(rebuilt.max_abs_diff(&a) <= 1e-10 * a.max_abs());
            assert!(orthonormality_error(&svd.u) <= 1e-10);
            assert!(orthonormality_error(&svd.v) <= 1e-10);
        }
    }

    #[test]
    fn svd_of_outer_product() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [2.0, 1.0, -1.0];
        let a = Matrix::from_fn(4, 3, |i, j| u[i] * v[j]);
        let s = svd_values(&a).unwrap();
        assert!((s[0] - norm2(&u) * norm2(&v)).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12 && s[2].abs() < 1e-12);
        let svd = svd_thin(&a).unwrap();
        assert!(orthonormality_error(&svd.u) <= 1e-12);
    }

    #[test]
    fn ridge_inverse_examples() {
        let inv = ridge_inverse(&Matrix::identity(3), 0.5).unwrap();
        assert!(inv.max_abs_diff(&Matrix::identity(3).scale(2.0 / 3.0)) < 1e-15);
        let inv = ridge_inverse(&Matrix::from_diag(&[3.0, 0.0]), 1.0).unwrap();
        assert!(inv.max_abs_diff(&Matrix::from_diag(&[0.25, 1.0])) < 1e-15);
        assert_eq!(
            ridge_inverse(&Matrix::identity(2), 0.0),
            Err(LinalgError::NonPositiveRidge(0.0))
        );
    }

    #[test]
    fn ridge_inverse_random_psd_residual() {
        for seed in 0..5 {
            let b = random(6, 4, seed);
            let g = b.t_matmul(&b);
            let inv = ridge_inverse(&g, 1e-3).unwrap();
            let mut shifted = g.clone();
            for i in 0..4 {
                shifted[(i, i)] += 1e-3;
            }
            assert!(shifted.matmul(&inv).max_abs_diff(&Matrix::identity(4)) <= 1e-9);
        }
    }

    #[test]
    fn numerical_rank_of_low_rank_product() {
        let a = random(6, 2, 1).matmul(&random(2, 5, 2));
        assert_eq!(numerical_rank(&a, 1e-8).unwrap(), 2);
    }
}
