//! Dense row-major `f32` matrices and vectors.
//!
//! Every dot product accumulates in `f64` sequentially over the inner
//! dimension and rounds once to `f32`. The blocked kernel below preserves that
//! per-output accumulation order, so blocked and naive products agree
//! bit-for-bit.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at position {0}")]
    NonFinite(usize),
    #[error("cosine undefined for a zero-norm vector")]
    ZeroNorm,
}

fn check_finite(data: &[f32]) -> Result<(), LinalgError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(LinalgError::NonFinite(pos)),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

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

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f32, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// `self · v`, one sequential dot product per row.
    pub fn matvec(&self, v: &[f32]) -> Result<Vec<f32>, LinalgError> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                expected: self.cols,
                found: v.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v) as f32).collect())
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            expected: a.cols,
            found: b.rows,
        });
    }
    let bt = b.transpose();
    let mut out = vec![0.0; a.rows * b.cols];
    gemm_nt(&a.data, a.rows, a.cols, &bt.data, b.cols, 1.0, &mut out);
    Ok(Matrix {
        rows: a.rows,
        cols: b.cols,
        data: out,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f32>,
}

impl Vector {
    pub fn new(data: Vec<f32>) -> Result<Self, LinalgError> {
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Scales to unit L2 norm. Returns `ZeroNorm` for the zero vector.
    pub fn normalized(&self) -> Result<Vector, LinalgError> {
        let norm = self.norm();
        if norm == 0.0 {
            return Err(LinalgError::ZeroNorm);
        }
        Ok(Vector {
            data: self
                .data
                .iter()
                .map(|&v| (f64::from(v) / norm) as f32)
                .collect(),
        })
    }
}

impl From<Vector> for Vec<f32> {
    fn from(v: Vector) -> Self {
        v.data
    }
}

/// Sequential `f64` dot product. Callers guarantee equal lengths.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += f64::from(x) * f64::from(y);
    }
    acc
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(u: &Vector, v: &Vector) -> Result<f32, LinalgError> {
    cosine_slices(u.as_slice(), v.as_slice())
}

pub(crate) fn cosine_slices(u: &[f32], v: &[f32]) -> Result<f32, LinalgError> {
    if u.len() != v.len() {
        return Err(LinalgError::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(LinalgError::ZeroNorm);
    }
    let sim = (dot(u, v) / (nu * nv)) as f32;
    Ok(sim.clamp(-1.0, 1.0))
}

/// `out[i][j] = scale * dot(x_i, w_j)` for `x: n×k`, `w: m×k`, both row-major.
///
/// Register-blocked 4×4; each output keeps the sequential accumulation order
/// of [`dot`].
pub(crate) fn gemm_nt(x: &[f32], n: usize, k: usize, w: &[f32], m: usize, scale: f64, out: &mut [f32]) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), m * k);
    debug_assert_eq!(out.len(), n * m);

    let n4 = n - n % 4;
    let m4 = m - m % 4;
    for i in (0..n4).step_by(4) {
        let xr: [&[f32]; 4] = std::array::from_fn(|a| &x[(i + a) * k..(i + a + 1) * k]);
        for j in (0..m4).step_by(4) {
            let wr: [&[f32]; 4] = std::array::from_fn(|b| &w[(j + b) * k..(j + b + 1) * k]);
            let mut acc = [[0.0f64; 4]; 4];
            for t in 0..k {
                let xv = [
                    f64::from(xr[0][t]),
                    f64::from(xr[1][t]),
                    f64::from(xr[2][t]),
                    f64::from(xr[3][t]),
                ];
                let wv = [
                    f64::from(wr[0][t]),
                    f64::from(wr[1][t]),
                    f64::from(wr[2][t]),
                    f64::from(wr[3][t]),
                ];
                for a in 0..4 {
                    for b in 0..4 {
                        acc[a][b] += xv[a] * wv[b];
                    }
                }
            }
            for a in 0..4 {
                for b in 0..4 {
                    out[(i + a) * m + j + b] = (scale * acc[a][b]) as f32;
                }
            }
        }
        for j in m4..m {
            let wj = &w[j * k..(j + 1) * k];
            for a in 0..4 {
                out[(i + a) * m + j] = (scale * dot(xr[a], wj)) as f32;
            }
        }
    }
    for i in n4..n {
        let xi = &x[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = (scale * dot(xi, &w[j * k..(j + 1) * k])) as f32;
        }
    }
}
