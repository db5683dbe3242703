//! Dense row-major tensors and the plain (untaped) kernels the tape builds on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense, row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Self {
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        debug_assert_eq!(k, other.shape[0]);
        let mut out = vec![0.0; m * n];
        if n == 0 || k == 0 {
            return Self { shape: vec![m, n], data: out };
        }
        match n {
            1 => matmul_narrow::<1>(&self.data, &other.data, &mut out, k),
            2 => matmul_narrow::<2>(&self.data, &other.data, &mut out, k),
            3 => matmul_narrow::<3>(&self.data, &other.data, &mut out, k),
            4 => matmul_narrow::<4>(&self.data, &other.data, &mut out, k),
            _ => matmul_rows(&self.data, &other.data, &mut out, k, n),
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    pub fn symmetrized(&self) -> Self {
        let t = self.transpose();
        self.zip_map(&t, |a, b| 0.5 * (a + b))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.shape[0].min(self.shape[1]);
        (0..n).map(|i| self.at(i, i)).collect()
    }
}

fn matmul_rows(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize) {
    for (orow, arow) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&x, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

// Fixed-width rows let the compiler keep each output row in registers.
fn matmul_narrow<const N: usize>(a: &[f64], b: &[f64], out: &mut [f64], k: usize) {
    for (orow, arow) in out.chunks_exact_mut(N).zip(a.chunks_exact(k)) {
        let mut acc = [0.0; N];
        for (&x, brow) in arow.iter().zip(b.chunks_exact(N)) {
            for j in 0..N {
                acc[j] += x * brow[j];
            }
        }
        orow.copy_from_slice(&acc);
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// Only the lower triangle of `a` is read. On failure the error names the
/// 1-based order of the leading minor that is not positive.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.rank() != 2 || a.cols() != n {
        return Err(Error::Shape(format!("cholesky needs a square matrix, got {:?}", a.shape())));
    }
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut d = a.at(j, j);
        for k in 0..j {
            d -= l.at(j, k) * l.at(j, k);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { minor: j + 1 });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in (j + 1)..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

/// Solves `t · X = b` for triangular `t` (lower when `lower`, else upper).
pub fn solve_triangular(t: &Tensor, b: &Tensor, lower: bool) -> Tensor {
    let n = t.rows();
    let m = b.cols();
    let mut x = b.clone();
    if lower {
        for i in 0..n {
            let d = t.at(i, i);
            for c in 0..m {
                let mut s = x.at(i, c);
                for k in 0..i {
                    s -= t.at(i, k) * x.at(k, c);
                }
                x.set(i, c, s / d);
            }
        }
    } else {
        for i in (0..n).rev() {
            let d = t.at(i, i);
            for c in 0..m {
                let mut s = x.at(i, c);
                for k in (i + 1)..n {
                    s -= t.at(i, k) * x.at(k, c);
                }
                x.set(i, c, s / d);
            }
        }
    }
    x
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &Tensor) -> Result<Tensor> {
    let l = cholesky(a)?;
    let n = a.rows();
    let y = solve_triangular(&l, &Tensor::eye(n), true);
    Ok(solve_triangular(&l.transpose(), &y, false))
}

pub fn logdet_spd(a: &Tensor) -> Result<f64> {
    let l = cholesky(a)?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}
