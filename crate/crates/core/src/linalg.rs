//! Dense row-major matrices and the handful of kernels the reconstruction
//! heads need: products, Gram matrices and Cholesky-based SPD solves.
//!
//! Every kernel computes each output row from the corresponding input row
//! with a fixed operation order, so stacking more rows into a batch never
//! changes the bits of an existing row.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, NumCast};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floating point element type accepted by [`Matrix`].
pub trait Real:
    Float + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Tag used in binary containers.
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to float")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("float converts to f64")
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn tag(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(Precision::F32),
            2 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::F32 => f.write_str("f32"),
            Precision::F64 => f.write_str("f64"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-positive pivot {value:e} at index {pivot} during Cholesky factorization")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[i * self.cols..(i + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Like [`Matrix::from_vec`] but also rejects NaN and infinities.
    pub fn from_vec_checked(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, LinalgError> {
        let m = Self::from_vec(rows, cols, data)?;
        m.check_finite()?;
        Ok(m)
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn check_finite(&self) -> Result<(), LinalgError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(p) => Err(LinalgError::NonFinite {
                row: p / self.cols.max(1),
                col: p % self.cols.max(1),
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self, LinalgError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, LinalgError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self, LinalgError> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self, LinalgError> {
        if self.shape() != other.shape() {
            return Err(LinalgError::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Adds `v` to every diagonal entry in place.
    pub fn add_diagonal(&mut self, v: T) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] = self.data[i * self.cols + i] + v;
        }
    }

    /// Squared Frobenius norm, accumulated in f64.
    pub fn frobenius_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| {
                let v = v.as_f64();
                v * v
            })
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Copies rows `start..start + len` into a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows, "row slice out of range");
        Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Stacks matrices vertically.
    pub fn vstack(parts: &[&Self]) -> Result<Self, LinalgError> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        for m in parts {
            if m.cols != cols {
                return Err(LinalgError::Shape {
                    op: "vstack",
                    left: (parts[0].rows, cols),
                    right: m.shape(),
                });
            }
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix {
            rows: data.len() / cols.max(1),
            cols,
            data,
        })
    }

    /// Reorders rows so that output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.rows);
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Mean over rows, as a 1×cols matrix.
    pub fn mean_rows(&self) -> Self {
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o = *o + v;
            }
        }
        let n = T::from_f64(self.rows as f64);
        Matrix {
            rows: 1,
            cols: self.cols,
            data: out.into_iter().map(|v| v / n).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// A stack of equally shaped matrices stored contiguously, batch outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchedMatrix<T> {
    batch: usize,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> BatchedMatrix<T> {
    pub fn from_matrices(items: &[Matrix<T>]) -> Result<Self, LinalgError> {
        let (rows, cols) = items.first().map_or((0, 0), |m| m.shape());
        let mut data = Vec::with_capacity(items.len() * rows * cols);
        for m in items {
            if m.shape() != (rows, cols) {
                return Err(LinalgError::Shape {
                    op: "batch",
                    left: (rows, cols),
                    right: m.shape(),
                });
            }
            data.extend_from_slice(m.as_slice());
        }
        Ok(BatchedMatrix {
            batch: items.len(),
            rows,
            cols,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn inner_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Copies out batch element `i`.
    pub fn get(&self, i: usize) -> Matrix<T> {
        let n = self.rows * self.cols;
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Matrix<T>> + '_ {
        (0..self.batch).map(move |i| self.get(i))
    }
}

/// Standard matrix product `a · b`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    if a.cols != b.cols {
        return Err(LinalgError::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

/// Inner product with eight independent partial sums, combined in a fixed
/// order, so the result depends only on the two slices.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GramMode {
    /// `S · Sᵀ`, rows × rows.
    Outer,
    /// `Sᵀ · S`, cols × cols.
    Inner,
}

/// Gram matrix of `s`. Only the upper triangle is computed; the lower is a
/// mirror, so the result is exactly symmetric.
pub fn gram<T: Real>(s: &Matrix<T>, mode: GramMode) -> Matrix<T> {
    match mode {
        GramMode::Outer => {
            let n = s.rows;
            let mut g = Matrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = dot(s.row(i), s.row(j));
                    g.data[i * n + j] = v;
                    g.data[j * n + i] = v;
                }
            }
            g
        }
        GramMode::Inner => {
            let n = s.cols;
            let mut g = Matrix::zeros(n, n);
            // Accumulate outer products of rows; each row is a rank-1 update.
            for k in 0..s.rows {
                let row = s.row(k);
                for i in 0..n {
                    let ri = row[i];
                    if ri == T::zero() {
                        continue;
                    }
                    let grow = &mut g.data[i * n..(i + 1) * n];
                    for j in i..n {
                        grow[j] = grow[j] + ri * row[j];
                    }
                }
            }
            for i in 0..n {
                for j in 0..i {
                    g.data[i * n + j] = g.data[j * n + i];
                }
            }
            g
        }
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky<T> {
    l: Matrix<T>,
}

impl<T: Real> Cholesky<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self, LinalgError> {
        if a.rows != a.cols {
            return Err(LinalgError::NotSquare {
                rows: a.rows,
                cols: a.cols,
            });
        }
        let n = a.rows;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let ljrow = &l.data[j * n..j * n + j];
            let diag = a.data[j * n + j] - dot(ljrow, ljrow);
            if !(diag > T::zero()) || !diag.is_finite() {
                return Err(LinalgError::NotPositiveDefinite {
                    pivot: j,
                    value: diag.as_f64(),
                });
            }
            let ljj = diag.sqrt();
            l.data[j * n + j] = ljj;
            for i in j + 1..n {
                let s = dot(&l.data[i * n..i * n + j], &l.data[j * n..j * n + j]);
                l.data[i * n + j] = (a.data[i * n + j] - s) / ljj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    pub fn factor_matrix(&self) -> &Matrix<T> {
        &self.l
    }

    /// Solves `A X = B`. Each column of `B` is handled independently with an
    /// identical sequence of row operations.
    pub fn solve(&self, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
        let n = self.l.rows;
        if b.rows != n {
            return Err(LinalgError::Shape {
                op: "spd_solve",
                left: (n, n),
                right: b.shape(),
            });
        }
        let m = b.cols;
        let l = &self.l.data;
        let mut x = b.clone();
        // L y = b
        for i in 0..n {
            let (done, rest) = x.data.split_at_mut(i * m);
            let xi = &mut rest[..m];
            for j in 0..i {
                let lij = l[i * n + j];
                if lij == T::zero() {
                    continue;
                }
                let xj = &done[j * m..(j + 1) * m];
                for (a, &b) in xi.iter_mut().zip(xj) {
                    *a = *a - lij * b;
                }
            }
            let lii = l[i * n + i];
            for a in xi.iter_mut() {
                *a = *a / lii;
            }
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let (head, tail) = x.data.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            for j in i + 1..n {
                let lji = l[j * n + i];
                if lji == T::zero() {
                    continue;
                }
                let xj = &tail[(j - i - 1) * m..(j - i) * m];
                for (a, &b) in xi.iter_mut().zip(xj) {
                    *a = *a - lji * b;
                }
            }
            let lii = l[i * n + i];
            for a in xi.iter_mut() {
                *a = *a / lii;
            }
        }
        Ok(x)
    }

    /// Solves `X A = B` for symmetric `A`, i.e. `X = B A⁻¹`.
    pub fn solve_right(&self, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
        if b.cols != self.l.rows {
            return Err(LinalgError::Shape {
                op: "spd_solve_right",
                left: b.shape(),
                right: (self.l.rows, self.l.rows),
            });
        }
        Ok(self.solve(&b.transpose())?.transpose())
    }

    pub fn inverse(&self) -> Matrix<T> {
        self.solve(&Matrix::identity(self.dim()))
            .expect("identity has matching shape")
    }
}

/// Solves `A X = B` for symmetric positive-definite `A`.
pub fn spd_solve<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    if a.rows != b.rows {
        return Err(LinalgError::Shape {
            op: "spd_solve",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Cholesky::factor(a)?.solve(b)
}

/// Solves `X A = B` for symmetric positive-definite `A`.
pub fn spd_solve_right<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    if a.cols != b.cols {
        return Err(LinalgError::Shape {
            op: "spd_solve_right",
            left: b.shape(),
            right: a.shape(),
        });
    }
    Cholesky::factor(a)?.solve_right(b)
}
