//! Dense row-major vectors, matrices and order-3 tensors.
//!
//! Only what the adjoint engines need: BLAS-1/2 style kernels, a partial-pivot
//! LU for desk-scale systems, a linear conjugate-gradient solver that stops on
//! non-positive curvature, and the middle-index tensor contractions used when
//! assembling the exact second derivatives of the reduced middle-level
//! objective.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, TsgError};

#[derive(Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize) -> f64) -> Self {
        Vector((0..dim).map(f).collect())
    }

    /// The `idx`-th canonical basis vector.
    pub fn basis(dim: usize, idx: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[idx] = 1.0;
        v
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Vector(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        Vector(self.0.iter().map(|v| alpha * v).collect())
    }

    pub fn scale_mut(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Vector) {
        debug_assert_eq!(self.dim(), x.dim());
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += alpha * v;
        }
    }

    /// Returns `self + alpha * x` without mutating either operand.
    pub fn plus_scaled(&self, alpha: f64, x: &Vector) -> Vector {
        let mut out = self.clone();
        out.axpy(alpha, x);
        out
    }

    /// Stacks `self` on top of `other`.
    pub fn concat(&self, other: &Vector) -> Vector {
        let mut data = self.0.clone();
        data.extend_from_slice(&other.0);
        Vector(data)
    }

    pub fn slice(&self, start: usize, len: usize) -> Vector {
        Vector(self.0[start..start + len].to_vec())
    }

    /// The vector viewed as a `dim x 1` matrix.
    pub fn to_column(&self) -> Matrix {
        Matrix {
            rows: self.dim(),
            cols: 1,
            data: self.0.clone(),
        }
    }

    /// Relative discrepancy `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
    pub fn relative_error(&self, other: &Vector) -> f64 {
        let scale = self.norm().max(other.norm());
        if scale == 0.0 {
            0.0
        } else {
            (self - other).norm() / scale
        }
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl<const N: usize> From<[f64; N]> for Vector {
    fn from(v: [f64; N]) -> Self {
        Vector(v.to_vec())
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for &Vector {
    type Output = Vector;
    fn add(self, rhs: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), rhs.dim());
        Vector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &Vector {
    type Output = Vector;
    fn sub(self, rhs: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), rhs.dim());
        Vector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl Add for Vector {
    type Output = Vector;
    fn add(mut self, rhs: Vector) -> Vector {
        self += &rhs;
        self
    }
}

impl Sub for Vector {
    type Output = Vector;
    fn sub(mut self, rhs: Vector) -> Vector {
        self -= &rhs;
        self
    }
}

impl AddAssign<&Vector> for Vector {
    fn add_assign(&mut self, rhs: &Vector) {
        self.axpy(1.0, rhs);
    }
}

impl SubAssign<&Vector> for Vector {
    fn sub_assign(&mut self, rhs: &Vector) {
        self.axpy(-1.0, rhs);
    }
}

impl Neg for Vector {
    type Output = Vector;
    fn neg(mut self) -> Vector {
        self.scale_mut(-1.0);
        self
    }
}

impl Mul<&Vector> for f64 {
    type Output = Vector;
    fn mul(self, rhs: &Vector) -> Vector {
        rhs.scaled(self)
    }
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    /// Rectangular identity: ones on the main diagonal, zeros elsewhere.
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn scaled_identity(n: usize, alpha: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = alpha;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("Matrix::from_row_major", rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            check_dim("Matrix::from_rows", c, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Outer product `u v^T`.
    pub fn outer(u: &Vector, v: &Vector) -> Self {
        Self::from_fn(u.dim(), v.dim(), |i, j| u[i] * v[j])
    }

    pub fn diag(d: &Vector) -> Self {
        let mut m = Self::zeros(d.dim(), d.dim());
        for i in 0..d.dim() {
            m[(i, i)] = d[i];
        }
        m
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector::from_fn(self.rows, |i| self[(i, j)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute row sum (the induced infinity norm).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in 0..i {
                let a = self[(i, j)];
                let b = self[(j, i)];
                if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
                    return false;
                }
            }
        }
        true
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| alpha * v).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += alpha * o;
        }
    }

    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        check_dim("Matrix::matvec", self.cols, v.dim())?;
        Ok(Vector::from_fn(self.rows, |i| {
            self.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum()
        }))
    }

    /// `self^T v` without materializing the transpose.
    pub fn matvec_t(&self, v: &Vector) -> Result<Vector> {
        check_dim("Matrix::matvec_t", self.rows, v.dim())?;
        let mut out = Vector::zeros(self.cols);
        for i in 0..self.rows {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for (o, a) in out.as_mut_slice().iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim("Matrix::matmul", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
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

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.axpy(1.0, rhs);
        out
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.axpy(-1.0, rhs);
        out
    }
}

/// Order-3 tensor stored row-major: `T[a][b][c]` lives at `(a*d2 + b)*d3 + c`.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d1: usize, d2: usize, d3: usize) -> Self {
        Tensor3 {
            dims: (d1, d2, d3),
            data: vec![0.0; d1 * d2 * d3],
        }
    }

    pub fn from_data(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        check_dim("Tensor3::from_data", dims.0 * dims.1 * dims.2, data.len())?;
        Ok(Tensor3 { dims, data })
    }

    pub fn from_fn(
        dims: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(dims.0 * dims.1 * dims.2);
        for a in 0..dims.0 {
            for b in 0..dims.1 {
                for c in 0..dims.2 {
                    data.push(f(a, b, c));
                }
            }
        }
        Tensor3 { dims, data }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.dims.1 + b) * self.dims.2 + c]
    }

    pub fn set(&mut self, a: usize, b: usize, c: usize, value: f64) {
        let idx = (a * self.dims.1 + b) * self.dims.2 + c;
        self.data[idx] = value;
    }

    /// Middle-index slice `T[:, b, :]`.
    pub fn middle_slice(&self, b: usize) -> Matrix {
        let (d1, _, d3) = self.dims;
        Matrix::from_fn(d1, d3, |a, c| self.get(a, b, c))
    }
}

/// Contracts the middle index with a vector: `out[a][c] = sum_b T[a][b][c] v[b]`.
pub fn tensor_contract_vec(t: &Tensor3, v: &Vector) -> Result<Matrix> {
    let (d1, d2, d3) = t.dims;
    check_dim("tensor_contract_vec", d2, v.dim())?;
    let mut out = Matrix::zeros(d1, d3);
    for a in 0..d1 {
        for b in 0..d2 {
            let vb = v[b];
            if vb == 0.0 {
                continue;
            }
            let base = (a * d2 + b) * d3;
            for c in 0..d3 {
                out[(a, c)] += t.data[base + c] * vb;
            }
        }
    }
    Ok(out)
}

/// Multiplies the middle index by a matrix: `out[a][j][c] = sum_b T[a][b][c] M[b][j]`.
pub fn tensor_contract_mat(t: &Tensor3, m: &Matrix) -> Result<Tensor3> {
    let (d1, d2, d3) = t.dims;
    check_dim("tensor_contract_mat", d2, m.rows())?;
    let k = m.cols();
    let mut out = Tensor3::zeros(d1, k, d3);
    for a in 0..d1 {
        for b in 0..d2 {
            for j in 0..k {
                let mbj = m[(b, j)];
                if mbj == 0.0 {
                    continue;
                }
                for c in 0..d3 {
                    let idx = (a * k + j) * d3 + c;
                    out.data[idx] += t.get(a, b, c) * mbj;
                }
            }
        }
    }
    Ok(out)
}

/// Partial-pivot LU factorization `P A = L U`.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Matrix,
    perm: Vec<usize>,
}

const PIVOT_TOL: f64 = 1e-12;

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Lu> {
        if a.rows() != a.cols() {
            return Err(TsgError::DimensionMismatch {
                context: "Lu::factor (square)",
                expected: a.rows(),
                got: a.cols(),
            });
        }
        if !a.is_finite() {
            return Err(TsgError::NonFinite("Lu::factor input".into()));
        }
        let n = a.rows();
        let tol = PIVOT_TOL * a.max_abs().max(f64::MIN_POSITIVE);
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot <= tol {
                return Err(TsgError::Singular { pivot });
            }
            if p != k {
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
                perm.swap(k, p);
            }
            let akk = lu[(k, k)];
            for i in k + 1..n {
                let factor = lu[(i, k)] / akk;
                lu[(i, k)] = factor;
                if factor != 0.0 {
                    for j in k + 1..n {
                        let ukj = lu[(k, j)];
                        lu[(i, j)] -= factor * ukj;
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    pub fn solve(&self, b: &Vector) -> Result<Vector> {
        check_dim("Lu::solve", self.n, b.dim())?;
        let n = self.n;
        let mut x = Vector::from_fn(n, |i| b[self.perm[i]]);
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        Ok(x)
    }

    pub fn solve_matrix(&self, b: &Matrix) -> Result<Matrix> {
        check_dim("Lu::solve_matrix", self.n, b.rows())?;
        let mut out = Matrix::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let col = self.solve(&b.column(j))?;
            for i in 0..b.rows() {
                out[(i, j)] = col[i];
            }
        }
        Ok(out)
    }
}

/// Solves `A x = b` with partial-pivot LU.
pub fn solve_dense(a: &Matrix, b: &Vector) -> Result<Vector> {
    Lu::factor(a)?.solve(b)
}

/// Solves `A X = B` column by column.
pub fn solve_dense_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Lu::factor(a)?.solve_matrix(b)
}

/// True when `a` is symmetric and its Cholesky factorization succeeds.
pub fn is_positive_definite(a: &Matrix) -> bool {
    if a.rows() != a.cols() || !a.is_symmetric() || !a.is_finite() {
        return false;
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 {
            return false;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    true
}

#[derive(Clone, Debug)]
pub struct CgReport {
    pub solution: Vector,
    pub iterations: usize,
    pub residual_norm: f64,
    pub terminated_on_curvature: bool,
}

/// `d^T A d <= CURVATURE_EPS * ||d||^2` is treated as non-positive curvature.
const CURVATURE_EPS: f64 = 1e-14;
/// The residual is recomputed from scratch this often to bound recurrence drift.
const RESIDUAL_REFRESH: usize = 50;

/// Linear conjugate gradient for `A v = b` starting from `v = 0`.
///
/// Stops when `||A v - b|| <= tol * max(1, ||b||)`, when a search direction
/// with non-positive curvature shows up (returning the iterate held at that
/// point), or after `max_iters` updates.
pub fn cg_solve<F>(mut apply_a: F, b: &Vector, tol: f64, max_iters: usize) -> Result<CgReport>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    if !(tol > 0.0) {
        return Err(TsgError::InvalidArgument(format!(
            "cg tolerance must be positive, got {tol}"
        )));
    }
    if !b.is_finite() {
        return Err(TsgError::NonFinite("cg right-hand side".into()));
    }
    let n = b.dim();
    let threshold = tol * b.norm().max(1.0);
    let mut x = Vector::zeros(n);
    let mut r = b.clone();
    let mut r_sq = r.norm_sq();
    let mut d = r.clone();
    let mut iterations = 0;

    while r_sq.sqrt() > threshold && iterations < max_iters {
        let ad = apply_a(&d)?;
        check_dim("cg_solve operator output", n, ad.dim())?;
        let curvature = d.dot(&ad);
        if !curvature.is_finite() {
            return Err(TsgError::NonFinite("cg curvature".into()));
        }
        if curvature <= CURVATURE_EPS * d.norm_sq() {
            return Ok(CgReport {
                solution: x,
                iterations,
                residual_norm: r_sq.sqrt(),
                terminated_on_curvature: true,
            });
        }
        let step = r_sq / curvature;
        x.axpy(step, &d);
        iterations += 1;
        if iterations % RESIDUAL_REFRESH == 0 {
            let ax = apply_a(&x)?;
            r = b - &ax;
        } else {
            r.axpy(-step, &ad);
        }
        let r_sq_new = r.norm_sq();
        let beta = r_sq_new / r_sq;
        r_sq = r_sq_new;
        let mut next = r.clone();
        next.axpy(beta, &d);
        d = next;
    }

    Ok(CgReport {
        solution: x,
        iterations,
        residual_norm: r_sq.sqrt(),
        terminated_on_curvature: false,
    })
}

/// Power-iteration estimate of the largest-magnitude eigenvalue of a
/// symmetric operator, started from the normalized all-ones vector.
pub fn power_iteration<F>(mut apply: F, dim: usize, iterations: usize) -> Result<f64>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    let mut v = Vector::filled(dim, 1.0 / (dim as f64).sqrt());
    let mut estimate = 0.0;
    for _ in 0..iterations.max(1) {
        let av = apply(&v)?;
        check_dim("power_iteration operator output", dim, av.dim())?;
        let nrm = av.norm();
        estimate = nrm;
        if nrm == 0.0 || !nrm.is_finite() {
            break;
        }
        v = av.scaled(1.0 / nrm);
    }
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(m: &Matrix) -> impl FnMut(&Vector) -> Result<Vector> + '_ {
        move |v| m.matvec(v)
    }

    #[test]
    fn cg_scaled_identity() {
        let a = Matrix::scaled_identity(2, 2.0);
        let rep = cg_solve(op(&a), &Vector::from([2.0, 4.0]), 1e-12, 10).unwrap();
        assert!(!rep.terminated_on_curvature);
        assert!((rep.solution[0] - 1.0).abs() < 1e-14);
        assert!((rep.solution[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn cg_matches_cramer() {
        // det = 11; x = (1*3 - 1*2)/11, y = (4*2 - 1*1)/11
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let rep = cg_solve(op(&a), &Vector::from([1.0, 2.0]), 1e-12, 10).unwrap();
        assert!((rep.solution[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((rep.solution[1] - 7.0 / 11.0).abs() < 1e-12);
        assert!(rep.iterations <= 2);
    }

    #[test]
    fn cg_detects_negative_curvature_immediately() {
        let a = Matrix::scaled_identity(2, -1.0);
        let rep = cg_solve(op(&a), &Vector::from([1.0, 0.0]), 1e-10, 10).unwrap();
        assert!(rep.terminated_on_curvature);
        assert_eq!(rep.iterations, 0);
        assert_eq!(rep.solution, Vector::zeros(2));
    }

    #[test]
    fn cg_rejects_wrong_operator_dim() {
        let err = cg_solve(|_| Ok(Vector::zeros(3)), &Vector::from([1.0, 0.0]), 1e-8, 5);
        assert!(matches!(err, Err(TsgError::DimensionMismatch { .. })));
    }

    #[test]
    fn cg_zero_rhs_returns_zero() {
        let a = Matrix::identity(3);
        let rep = cg_solve(op(&a), &Vector::zeros(3), 1e-8, 5).unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(rep.solution, Vector::zeros(3));
    }

    #[test]
    fn dense_solve_examples() {
        let b = Vector::from([3.0, -1.0, 0.5]);
        assert_eq!(solve_dense(&Matrix::identity(3), &b).unwrap(), b);

        let d = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let x = solve_dense(&d, &Vector::from([2.0, 4.0])).unwrap();
        assert_eq!(x, Vector::from([1.0, 1.0]));

        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let x = solve_dense(&a, &Vector::from([1.0, 2.0])).unwrap();
        assert!((x[0] - 0.090909).abs() < 1e-6);
        assert!((x[1] - 0.636364).abs() < 1e-6);
    }

    #[test]
    fn dense_solve_needs_pivoting() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let x = solve_dense(&a, &Vector::from([2.0, 3.0])).unwrap();
        assert_eq!(x, Vector::from([3.0, 2.0]));
    }

    #[test]
    fn dense_solve_singular() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(
            solve_dense(&a, &Vector::from([1.0, 1.0])),
            Err(TsgError::Singular { .. })
        ));
    }

    #[test]
    fn contract_vec_examples() {
        let t = Tensor3::zeros(2, 2, 2);
        let m = tensor_contract_vec(&t, &Vector::from([1.0, 1.0])).unwrap();
        assert_eq!(m, Matrix::zeros(2, 2));

        let mut t = Tensor3::zeros(2, 2, 2);
        t.set(0, 0, 0, 1.0);
        let m = tensor_contract_vec(&t, &Vector::from([3.0, 0.0])).unwrap();
        let mut expected = Matrix::zeros(2, 2);
        expected[(0, 0)] = 3.0;
        assert_eq!(m, expected);

        assert!(tensor_contract_vec(&t, &Vector::zeros(3)).is_err());
    }

    #[test]
    fn contract_vec_basis_picks_middle_slice() {
        let t = Tensor3::from_fn((2, 3, 2), |a, b, c| (a * 7 + b * 3 + c) as f64 * 0.37 - 1.0);
        let m = tensor_contract_vec(&t, &Vector::basis(3, 1)).unwrap();
        assert_eq!(m, t.middle_slice(1));
    }

    #[test]
    fn contract_mat_examples() {
        let t = Tensor3::from_fn((2, 2, 3), |a, b, c| (a + 2 * b + 5 * c) as f64);
        let same = tensor_contract_mat(&t, &Matrix::identity(2)).unwrap();
        assert_eq!(same, t);

        let ones = Tensor3::from_fn((1, 2, 1), |_, _, _| 1.0);
        let m = Matrix::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let out = tensor_contract_mat(&ones, &m).unwrap();
        assert_eq!(out.dims(), (1, 1, 1));
        assert_eq!(out.get(0, 0, 0), 5.0);

        assert!(tensor_contract_mat(&ones, &Matrix::identity(3)).is_err());
    }

    #[test]
    fn matvec_t_matches_transpose() {
        let a = Matrix::from_fn(3, 4, |i, j| (i as f64) - 0.5 * j as f64);
        let v = Vector::from([1.0, -2.0, 0.5]);
        assert_eq!(a.matvec_t(&v).unwrap(), a.transpose().matvec(&v).unwrap());
    }

    #[test]
    fn symmetric_flag() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(a.is_symmetric());
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.1, 1.0]]).unwrap();
        assert!(!b.is_symmetric());
    }

    #[test]
    fn power_iteration_diagonal() {
        let a = Matrix::diag(&Vector::from([1.0, 5.0, 2.0]));
        let est = power_iteration(op(&a), 3, 60).unwrap();
        assert!((est - 5.0).abs() < 1e-6);
    }
}
