//! Dense row-major matrices, trainable parameters, and the handful of
//! primitives (product, cosine scores, sigmoid) the rest of the crate is
//! assembled from. Backward passes elsewhere are written by hand against
//! these; [`finite_diff_grad`] is the independent oracle they are checked
//! against.

use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "RawMatrix<T>")]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

#[derive(Deserialize)]
#[serde(bound = "T: Scalar")]
struct RawMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> TryFrom<RawMatrix<T>> for Matrix<T> {
    type Error = Error;

    fn try_from(raw: RawMatrix<T>) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-row matrix.
    pub fn row_vector(v: &[T]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Self { rows, cols, data }
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
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, values: &[T]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        self.check_same_shape("axpy", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(T::one(), other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-T::one(), other)?;
        Ok(out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn col_norm(&self, j: usize) -> T {
        (0..self.rows)
            .map(|i| self[(i, j)] * self[(i, j)])
            .sum::<T>()
            .sqrt()
    }

    pub fn col_norms(&self) -> Vec<T> {
        (0..self.cols).map(|j| self.col_norm(j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Drops the listed columns, keeping the rest in order.
    pub fn remove_cols(&self, drop: &[usize]) -> Self {
        let keep: Vec<usize> = (0..self.cols).filter(|j| !drop.contains(j)).collect();
        self.select_cols(&keep)
    }

    pub fn select_cols(&self, keep: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, keep.len());
        for i in 0..self.rows {
            for (nj, &j) in keep.iter().enumerate() {
                out[(i, nj)] = self[(i, j)];
            }
        }
        out
    }

    pub fn push_col(&self, values: &[T]) -> Result<Self> {
        if values.len() != self.rows {
            return Err(Error::Dimension {
                op: "push_col",
                left: self.shape(),
                right: (values.len(), 1),
            });
        }
        let mut out = Self::zeros(self.rows, self.cols + 1);
        for i in 0..self.rows {
            out.row_mut(i)[..self.cols].copy_from_slice(self.row(i));
            out[(i, self.cols)] = values[i];
        }
        Ok(out)
    }

    fn check_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// A trainable tensor: its value and an additively accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Matrix<T>) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.shape() != self.value.shape() {
            self.grad = Matrix::zeros(self.value.rows(), self.value.cols());
        } else {
            self.grad.fill(T::zero());
        }
    }

    /// Replaces the value, resetting the gradient to match its shape.
    pub fn set_value(&mut self, value: Matrix<T>) {
        self.value = value;
        self.grad = Matrix::zeros(self.value.rows(), self.value.cols());
    }

    pub fn numel(&self) -> usize {
        self.value.rows() * self.value.cols()
    }
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (p, &a_ip) in a.row(i).iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            for (o, &b_pj) in out_row.iter_mut().zip(b.row(p)) {
                *o += a_ip * b_pj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::Dimension {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for p in 0..a.rows {
        for (i, &a_pi) in a.row(p).iter().enumerate() {
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &b_pj) in out_row.iter_mut().zip(b.row(p)) {
                *o += a_pi * b_pj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::Dimension {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out[(i, j)] = dot(a.row(i), b.row(j));
        }
    }
    Ok(out)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Cosine similarity between `x` and every column of `w` (`d×K`).
pub fn cosine_scores<T: Scalar>(x: &[T], w: &Matrix<T>) -> Result<Vec<T>> {
    if x.len() != w.rows() {
        return Err(Error::Dimension {
            op: "cosine_scores",
            left: (1, x.len()),
            right: w.shape(),
        });
    }
    let x_norm = norm(x);
    if !(x_norm > T::zero()) {
        return Err(Error::Degenerate("token has zero norm".into()));
    }
    let col_norms = w.col_norms();
    if let Some(e) = col_norms.iter().position(|n| !(*n > T::zero())) {
        return Err(Error::Degenerate(format!(
            "expert representation column {e} has zero norm"
        )));
    }
    let mut out = vec![T::zero(); w.cols()];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    for (o, &n) in out.iter_mut().zip(&col_norms) {
        // rounding can push |cos| a hair past 1
        *o = (*o / (x_norm * n)).max(-T::one()).min(T::one());
    }
    Ok(out)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `σ'(v) = σ(v)(1 − σ(v))`.
#[inline]
pub fn sigmoid_grad<T: Scalar>(v: T) -> T {
    let s = sigmoid_scalar(v);
    s * (T::one() - s)
}

pub fn sigmoid<T: Scalar>(v: &[T]) -> Vec<T> {
    v.iter().map(|&x| sigmoid_scalar(x)).collect()
}

pub fn softmax<T: Scalar>(v: &[T]) -> Vec<T> {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Central-difference gradient of `f` at `p`, one entry at a time.
pub fn finite_diff_grad<T, F>(mut f: F, p: &Matrix<T>, eps: T) -> Result<Matrix<T>>
where
    T: Scalar,
    F: FnMut(&Matrix<T>) -> T,
{
    if !(eps > T::zero()) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut probe = p.clone();
    let mut grad = Matrix::zeros(p.rows(), p.cols());
    let two = T::lit(2.0);
    for idx in 0..p.data.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + eps;
        let up = f(&probe);
        probe.data[idx] = orig - eps;
        let down = f(&probe);
        probe.data[idx] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective evaluation at entry {idx} of the probed parameter"
            )));
        }
        grad.data[idx] = (up - down) / (two * eps);
    }
    Ok(grad)
}

/// Largest entrywise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_rel_err<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, floor: T) -> T {
    assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(T::zero(), T::max)
}
