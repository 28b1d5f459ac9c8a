//! Dense row-major `f64` tensors, a small reverse-mode tape, and AdamW.
//!
//! Tensors are rank ≤ 3 and immutable once built; every operation returns a
//! fresh tensor. Values that enter from outside (checkpoints, user input)
//! go through [`Tensor::new`], which rejects NaN and infinities.

mod optim;
mod tape;

pub use optim::{AdamW, AdamWConfig};
pub use tape::{ColumnMap, Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Default epsilon used by [`Tensor::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from external data, validating extents and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > 3 {
            return Err(Error::shape("tensor", format!("rank {} > 3", shape.len())));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {pos}")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for values produced by our own arithmetic.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_parts(vec![rows, cols], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    /// Convenience for literals: `Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])`.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix view; vectors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            2 => self.shape[0],
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Trailing extent (channel axis).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        let cols = self.cols();
        (0..self.rows()).map(|r| self.data[r * cols + c]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn require_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (p, q) = self.require_matrix("matmul")?;
        let (q2, r) = other.require_matrix("matmul")?;
        if q != q2 {
            return Err(Error::shape("matmul", format!("[{p}x{q}] x [{q2}x{r}]")));
        }
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let a_row = &self.data[i * q..(i + 1) * q];
            let out_row = &mut out[i * r..(i + 1) * r];
            let mut k = 0;
            while k + 4 <= q {
                let a = &a_row[k..k + 4];
                let b = &other.data[k * r..(k + 4) * r];
                let (b0, b1, b2, b3) = (&b[..r], &b[r..2 * r], &b[2 * r..3 * r], &b[3 * r..]);
                for ((((o, x0), x1), x2), x3) in out_row.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                    *o += a[0] * x0 + a[1] * x1 + a[2] * x2 + a[3] * x3;
                }
                k += 4;
            }
            for (k, &a) in a_row.iter().enumerate().skip(k) {
                let b_row = &other.data[k * r..(k + 1) * r];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_parts(vec![p, r], out))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_parts(vec![c, r], out)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.require_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Self::from_parts(self.shape.clone(), out)
    }

    /// Per-row normalisation followed by an affine map.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(self.layer_norm_parts(gain, bias, eps)?.0)
    }

    /// Returns `(output, normalised input, per-row 1/std)`.
    pub(crate) fn layer_norm_parts(
        &self,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let m = self.cols();
        if gain.numel() != m || bias.numel() != m {
            return Err(Error::shape(
                "layer_norm",
                format!("{m} channels, gain {:?}, bias {:?}", gain.shape, bias.shape),
            ));
        }
        let rows = self.rows();
        let mut xhat = vec![0.0; self.numel()];
        let mut out = vec![0.0; self.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = self.row(r);
            let mean = x.iter().sum::<f64>() / m as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..m {
                let h = (x[j] - mean) * is;
                xhat[r * m + j] = h;
                out[r * m + j] = h * gain.data[j] + bias.data[j];
            }
        }
        Ok((
            Self::from_parts(self.shape.clone(), out),
            Self::from_parts(self.shape.clone(), xhat),
            inv_std,
        ))
    }

    pub fn silu(&self) -> Tensor {
        self.map(|v| v * sigmoid(v))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = self.cols();
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let rows = self.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Ok(Self::from_parts(vec![rows, len], out))
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::Empty("concat_cols"));
        };
        let rows = first.rows();
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(p.row(r));
            }
        }
        Ok(Self::from_parts(vec![rows, total], out))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::Empty("concat_rows"));
        };
        let cols = first.cols();
        if parts.iter().any(|p| p.cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        let rows = data.len() / cols.max(1);
        Ok(Self::from_parts(vec![rows, cols], data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Squared Frobenius norm of `self - other`.
    pub fn sq_dist(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn mean_sq_diff(&self, other: &Tensor) -> f64 {
        self.sq_dist(other) / self.numel().max(1) as f64
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, seeded};

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (p, q, r) = (a.rows(), a.cols(), b.cols());
        Tensor::from_fn(p, r, |i, j| (0..q).map(|k| a.get(i, k) * b.get(k, j)).sum())
    }

    #[test]
    fn matmul_identity_and_literal() {
        let m = Tensor::from_rows(&[&[1.5, -2.0], &[0.25, 7.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = seeded(11);
        let a = gaussian_matrix(&mut rng, 5, 7, 1.0);
        let b = gaussian_matrix(&mut rng, 7, 3, 1.0);
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn rejects_non_finite_input() {
        assert!(matches!(Tensor::vector(vec![1.0, f64::NAN]), Err(Error::NonFinite(_))));
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_rows_cases() {
        let s = Tensor::from_rows(&[&[0.0, 0.0], &[1000.0, 0.0]]).unwrap().softmax_rows();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert_eq!(s.get(1, 0), 1.0);
        assert!(s.get(1, 1) < 1e-300);
        let mut rng = seeded(3);
        let r = gaussian_matrix(&mut rng, 6, 9, 4.0).softmax_rows();
        for i in 0..6 {
            assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::filled(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let c = Tensor::from_rows(&[&[2.0, 2.0, 2.0]]).unwrap();
        assert_eq!(c.layer_norm(&ones, &zeros, LAYER_NORM_EPS).unwrap().data(), &[0.0; 3]);

        let bias = Tensor::vector(vec![0.5, -1.0, 3.0]).unwrap();
        let x = Tensor::from_rows(&[&[1.0, 5.0, -2.0], &[0.0, 0.1, 9.0]]).unwrap();
        let y = x.layer_norm(&zeros, &bias, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.row(0), bias.data());
        assert_eq!(y.row(1), bias.data());

        let mut rng = seeded(5);
        let x = gaussian_matrix(&mut rng, 8, 16, 10.0);
        let ones = Tensor::filled(&[16], 1.0);
        let zeros = Tensor::zeros(&[16]);
        let y = x.layer_norm(&ones, &zeros, LAYER_NORM_EPS).unwrap();
        for r in 0..8 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn silu_limits() {
        let y = Tensor::vector(vec![0.0, 40.0, -40.0]).unwrap().silu();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 40.0).abs() < 1e-12);
        assert!(y.data()[2].abs() < 1e-12);
    }

    #[test]
    fn slice_and_concat_invert() {
        let mut rng = seeded(9);
        let x = gaussian_matrix(&mut rng, 4, 6, 1.0);
        let a = x.slice_cols(0, 2).unwrap();
        let b = x.slice_cols(2, 4).unwrap();
        assert_eq!(Tensor::concat_cols(&[&a, &b]).unwrap(), x);
        assert!(x.slice_cols(5, 2).is_err());
    }
}
