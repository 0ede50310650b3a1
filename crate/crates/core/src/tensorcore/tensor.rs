use serde::{Deserialize, Serialize};

use super::TensorError;
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor2D<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape {
                op: "from_vec",
                detail: format!("{} values for a {rows}x{cols} matrix", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    detail: format!("row {i} has {} columns, expected {cols}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Copies rows `[start, start + n)` into a new matrix.
    pub fn slice_rows(&self, start: usize, n: usize) -> Self {
        let c = self.cols;
        Self { rows: n, cols: c, data: self.data[start * c..(start + n) * c].to_vec() }
    }

    /// Copies columns `[start, start + n)` into a new matrix.
    pub fn slice_cols(&self, start: usize, n: usize) -> Self {
        let mut out = Self::zeros(self.rows, n);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + n]);
        }
        out
    }

    /// Gathers the listed rows, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// Horizontal concatenation.
    pub fn hstack(parts: &[&Self]) -> Result<Self, TensorError> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(TensorError::Shape { op: "hstack", detail: "row counts differ".into() });
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Self::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            let dst = out.row_mut(r);
            for p in parts {
                dst[off..off + p.cols].copy_from_slice(p.row(r));
                off += p.cols;
            }
        }
        Ok(out)
    }

    fn gemm_into(
        out: &mut Self,
        a: &Self,
        a_t: bool,
        b: &Self,
        b_t: bool,
        beta: T,
    ) {
        let (m, k) = if a_t { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let n = if b_t { b.rows } else { b.cols };
        debug_assert_eq!(out.shape(), (m, n));
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            for v in out.data.iter_mut() {
                *v = *v * beta;
            }
            return;
        }
        let (rsa, csa) = if a_t { (1, a.cols as isize) } else { (a.cols as isize, 1) };
        let (rsb, csb) = if b_t { (1, b.cols as isize) } else { (b.cols as isize, 1) };
        // SAFETY: strides describe the row-major buffers of `a`, `b` and `out`,
        // whose lengths were checked by the callers' shape validation.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
    }

    /// `self * other`
    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        if self.cols != other.rows {
            return Err(shape_err("matmul", self, other));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        Self::gemm_into(&mut out, self, false, other, false, T::zero());
        Ok(out)
    }

    /// `selfᵀ * other`
    pub fn matmul_tn(&self, other: &Self) -> Result<Self, TensorError> {
        if self.rows != other.rows {
            return Err(shape_err("matmul_tn", self, other));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        Self::gemm_into(&mut out, self, true, other, false, T::zero());
        Ok(out)
    }

    /// `self * otherᵀ`
    pub fn matmul_nt(&self, other: &Self) -> Result<Self, TensorError> {
        if self.cols != other.cols {
            return Err(shape_err("matmul_nt", self, other));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        Self::gemm_into(&mut out, self, false, other, true, T::zero());
        Ok(out)
    }

    /// `self += aᵀ * b`, used to accumulate weight gradients.
    pub fn add_matmul_tn(&mut self, a: &Self, b: &Self) -> Result<(), TensorError> {
        if a.rows != b.rows || self.shape() != (a.cols, b.cols) {
            return Err(shape_err("add_matmul_tn", a, b));
        }
        Self::gemm_into(self, a, true, b, false, T::one());
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(shape_err("add_assign", self, other));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn add_row_vector(&mut self, v: &[T]) -> Result<(), TensorError> {
        if v.len() != self.cols {
            return Err(TensorError::Shape {
                op: "add_row_vector",
                detail: format!("vector of {} for {} columns", v.len(), self.cols),
            });
        }
        for r in 0..self.rows {
            for (a, &b) in self.row_mut(r).iter_mut().zip(v) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Column sums, accumulated row by row in index order.
    pub fn column_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(TensorError::NonFinite {
                op,
                detail: format!("entry ({}, {}) = {}", i / self.cols.max(1), i % self.cols.max(1), self.data[i]),
            }),
        }
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor2D<U> {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor2D<T>, b: &Tensor2D<T>) -> TensorError {
    TensorError::Shape {
        op,
        detail: format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols),
    }
}
