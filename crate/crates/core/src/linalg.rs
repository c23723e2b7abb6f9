//! Minimal dense row-major matrix used by the attention and retrieval paths.
//!
//! Products accumulate in `f64` and round once to `f32` on store.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{input, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return input(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return input(format!("row {i} has {} columns, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let v: f32 = StandardNormal.sample(rng);
                v * std
            })
            .collect();
        Self { rows, cols, data }
    }

    /// Block-diagonal matrix with `blocks` random normal blocks; off-block entries are zero.
    pub fn random_block_diagonal<R: Rng + ?Sized>(
        dim: usize,
        blocks: usize,
        std: f32,
        rng: &mut R,
    ) -> Result<Self> {
        if blocks == 0 || dim % blocks != 0 {
            return input(format!("{blocks} blocks do not divide dimension {dim}"));
        }
        let b = dim / blocks;
        let mut m = Self::zeros(dim, dim);
        for g in 0..blocks {
            for r in 0..b {
                for c in 0..b {
                    let v: f32 = StandardNormal.sample(rng);
                    m.data[(g * b + r) * dim + g * b + c] = v * std;
                }
            }
        }
        Ok(m)
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
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · rhs`.
    /// `self · rhs` accumulated in `f32` by a blocked GEMM.
    pub fn matmul_f32(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return input(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        if self.rows == 0 || rhs.cols == 0 || self.cols == 0 {
            return Ok(out);
        }
        // SAFETY: all three buffers are dense row-major with the extents passed.
        unsafe {
            matrixmultiply::sgemm(
                self.rows,
                self.cols,
                rhs.cols,
                1.0,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                rhs.data.as_ptr(),
                rhs.cols as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                rhs.cols as isize,
                1,
            );
        }
        Ok(out)
    }

    /// Product accumulated and returned in `f64`, row-major.
    pub fn matmul_wide(&self, rhs: &Matrix) -> Result<Vec<f64>> {
        if self.cols != rhs.rows {
            return input(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            ));
        }
        let mut out = vec![0f64; self.rows * rhs.cols];
        for (r, acc) in out.chunks_exact_mut(rhs.cols.max(1)).take(self.rows).enumerate() {
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let a = a as f64;
                for (acc, &b) in acc.iter_mut().zip(rhs.row(k)) {
                    *acc += a * b as f64;
                }
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return input(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        let mut acc = vec![0f64; rhs.cols];
        for r in 0..self.rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let a = a as f64;
                for (acc, &b) in acc.iter_mut().zip(rhs.row(k)) {
                    *acc += a * b as f64;
                }
            }
            for (o, a) in out.row_mut(r).iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`, i.e. all pairwise row dot products.
    pub fn matmul_transposed(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return input(format!(
                "inner dimensions disagree: {}x{} vs {}x{}ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for (c, b) in rhs.iter_rows().enumerate() {
                out.data[r * rhs.rows + c] = dot(a, b) as f32;
            }
        }
        Ok(out)
    }

    /// Row vector times matrix: `v · self`.
    pub fn vec_mul(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.rows {
            return input(format!(
                "vector of length {} cannot multiply {}x{} matrix",
                v.len(),
                self.rows,
                self.cols
            ));
        }
        let mut acc = vec![0f64; self.cols];
        for (k, &a) in v.iter().enumerate() {
            let a = a as f64;
            for (acc, &b) in acc.iter_mut().zip(self.row(k)) {
                *acc += a * b as f64;
            }
        }
        Ok(acc.into_iter().map(|a| a as f32).collect())
    }

    /// Whether every entry outside the `blocks` equal diagonal blocks is exactly zero.
    pub fn is_block_diagonal(&self, blocks: usize) -> bool {
        if self.rows != self.cols || blocks == 0 || self.rows % blocks != 0 {
            return false;
        }
        let b = self.rows / blocks;
        (0..self.rows).all(|r| {
            let g = r / b;
            self.row(r)
                .iter()
                .enumerate()
                .all(|(c, &v)| c / b == g || v == 0.0)
        })
    }

    /// Copy of the diagonal block `g` of size `size`.
    pub fn diagonal_block(&self, g: usize, size: usize) -> Matrix {
        let mut out = Matrix::zeros(size, size);
        for r in 0..size {
            let src = &self.row(g * size + r)[g * size..(g + 1) * size];
            out.row_mut(r).copy_from_slice(src);
        }
        out
    }
}

/// Dot product with `f64` accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Eight-lane `f32` dot product. The fixed lane split lets the compiler vectorize it;
/// used on the dense baseline hot path only.
#[inline]
pub fn dot_f32_lanes(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    lanes.iter().sum::<f32>() + tail
}
