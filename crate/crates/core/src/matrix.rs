//! Minimal row-major dense matrix used for stencil oracles, eigenbases and kernels.

use std::ops::{Index, IndexMut};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|row| row.len() != c) {
            return Err(shape_err(format!("{c} columns"), format!("{} columns", bad.len())));
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(shape_err(
                format!("inner dimension {}", self.cols),
                format!("{}", other.rows),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(shape_err(format!("vector of length {}", self.cols), v.len()));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect())
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && (0..self.rows).all(|i| (0..i).all(|j| self[(i, j)] == self[(j, i)]))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.rows).map(|i| self.row(i).iter().copied().sum()).collect()
    }

    /// Minimises `|self * x - rhs|_2` by Householder QR.
    ///
    /// Fails with [`Error::Singular`] when the columns are (numerically) linearly dependent.
    pub fn solve_least_squares(&self, rhs: &[T]) -> Result<Vec<T>> {
        let (m, n) = (self.rows, self.cols);
        if rhs.len() != m {
            return Err(shape_err(format!("right-hand side of length {m}"), rhs.len()));
        }
        if m < n || n == 0 {
            return Err(Error::Singular(format!("{m}x{n} system is underdetermined")));
        }
        let mut a = self.clone();
        let mut b = rhs.to_vec();
        for k in 0..n {
            let norm = (k..m).map(|i| a[(i, k)] * a[(i, k)]).sum::<T>().sqrt();
            if norm == T::zero() {
                continue;
            }
            let alpha = if a[(k, k)] > T::zero() { -norm } else { norm };
            let mut v: Vec<T> = (k..m).map(|i| a[(i, k)]).collect();
            v[0] -= alpha;
            let vnorm2 = v.iter().map(|&x| x * x).sum::<T>();
            if vnorm2 == T::zero() {
                continue;
            }
            let two = T::lit(2.0);
            for j in k..n {
                let s = two * (k..m).map(|i| v[i - k] * a[(i, j)]).sum::<T>() / vnorm2;
                for i in k..m {
                    a[(i, j)] -= s * v[i - k];
                }
            }
            let s = two * (k..m).map(|i| v[i - k] * b[i]).sum::<T>() / vnorm2;
            for i in k..m {
                b[i] -= s * v[i - k];
            }
        }
        let max_diag = (0..n).fold(T::zero(), |acc, k| acc.max(a[(k, k)].abs()));
        let tol = max_diag * T::epsilon() * T::from_usize_lossy(m.max(n)) * T::lit(1e3);
        if let Some(k) = (0..n).find(|&k| a[(k, k)].abs() <= tol) {
            return Err(Error::Singular(format!("column {k} is linearly dependent")));
        }
        let mut x = vec![T::zero(); n];
        for k in (0..n).rev() {
            let tail: T = (k + 1..n).map(|j| a[(k, j)] * x[j]).sum();
            x[k] = (b[k] - tail) / a[(k, k)];
        }
        Ok(x)
    }
}

impl<T> Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}
