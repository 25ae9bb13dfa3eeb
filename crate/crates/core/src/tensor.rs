//! Dense row-major matrices of `f64`.
//!
//! Rows are samples and columns are coordinates. Matrix products go through
//! `matrixmultiply` on fixed 64-row output chunks; the chunking never depends
//! on the number of threads, which keeps products bitwise reproducible.

use std::ops::{Index, IndexMut};

use crate::error::{shape_err, Error, Result};
use crate::par::*;

/// Output rows per GEMM work item.
const ROW_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Strided read-only view used to express transposes without copying.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl Matrix2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Wrap a row-major buffer. Rejects length mismatches and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "entry ({}, {}) is not finite",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                ));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Matrix2D, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix2D {
        let mut out = Matrix2D::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn view(&self) -> View<'_> {
        View {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    fn view_t(&self) -> View<'_> {
        View {
            data: &self.data,
            rows: self.cols,
            cols: self.rows,
            rs: 1,
            cs: self.cols as isize,
        }
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Matrix2D) -> Result<Matrix2D> {
        gemm(self.view(), rhs.view(), "matmul")
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(&self, rhs: &Matrix2D) -> Result<Matrix2D> {
        gemm(self.view(), rhs.view_t(), "matmul_t")
    }

    /// `selfᵀ · rhs`
    pub fn t_matmul(&self, rhs: &Matrix2D) -> Result<Matrix2D> {
        gemm(self.view_t(), rhs.view(), "t_matmul")
    }

    /// Add `v` to every row.
    pub fn add_row_vector(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.cols {
            return Err(shape_err!(
                "row vector of length {} added to {} columns",
                v.len(),
                self.cols
            ));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (x, b) in row.iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(())
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &Matrix2D, scale: f64) -> Result<()> {
        self.ensure_same_shape(other, "add_scaled")?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += scale * y;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|x| *x = f(*x));
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (s, x) in sums.iter_mut().zip(row) {
                *s += x;
            }
        }
        sums
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.rows.max(1) as f64;
        self.column_sums().into_iter().map(|s| s / n).collect()
    }

    /// Gather rows by index (indices may repeat).
    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix2D> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(shape_err!(
                    "row index {i} out of range for {} rows",
                    self.rows
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix2D {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    /// Mean and sample standard deviation of all entries pooled together.
    pub fn pooled_mean_sd(&self) -> (f64, f64) {
        let n = self.data.len();
        if n == 0 {
            return (f64::NAN, f64::NAN);
        }
        let mean = self.data.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return (mean, 0.0);
        }
        let ss: f64 = self.data.iter().map(|x| (x - mean) * (x - mean)).sum();
        (mean, (ss / (n - 1) as f64).sqrt())
    }
}

impl Index<(usize, usize)> for Matrix2D {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(
            i < self.rows && j < self.cols,
            "index ({i}, {j}) out of bounds"
        );
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix2D {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        assert!(
            i < self.rows && j < self.cols,
            "index ({i}, {j}) out of bounds"
        );
        &mut self.data[i * self.cols + j]
    }
}

fn gemm(a: View<'_>, b: View<'_>, what: &str) -> Result<Matrix2D> {
    if a.cols != b.rows {
        return Err(shape_err!(
            "{what}: inner dimensions {}x{} · {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix2D::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    out.data
        .par_chunks_mut(ROW_CHUNK * n)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let r0 = (ci * ROW_CHUNK) as isize;
            let rows = chunk.len() / n;
            // SAFETY: r0 < a.rows, so the offset stays inside `a.data`; the
            // strides describe the valid extents of `a` and `b`, and `chunk`
            // is exactly `rows x n` contiguous row-major storage.
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr().offset(r0 * a.rs),
                    a.rs,
                    a.cs,
                    b.data.as_ptr(),
                    b.rs,
                    b.cs,
                    0.0,
                    chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
    Ok(out)
}

/// Squared Euclidean distance by direct subtraction.
#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `D[i][j] = ‖a_i − b_j‖²`, computed by direct subtraction so it is never negative.
pub fn pairwise_sq_dists(a: &Matrix2D, b: &Matrix2D) -> Result<Matrix2D> {
    if a.cols != b.cols {
        return Err(shape_err!(
            "pairwise_sq_dists: {} vs {} columns",
            a.cols,
            b.cols
        ));
    }
    let mut out = Matrix2D::zeros(a.rows, b.rows);
    if out.data.is_empty() {
        return Ok(out);
    }
    let n = b.rows;
    out.data
        .par_chunks_mut(n)
        .enumerate()
        .with_min_len(16)
        .for_each(|(i, row)| {
            let ai = a.row(i);
            for (j, d) in row.iter_mut().enumerate() {
                *d = sq_dist(ai, b.row(j));
            }
        });
    Ok(out)
}
