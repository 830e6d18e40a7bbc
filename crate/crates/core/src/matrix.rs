//! Dense row-major f64 matrices and the forward-only encoder primitives.
//!
//! Everything here is plain arithmetic with no gradient recording; the
//! trainer's tape in [`crate::tape`] builds on the same routines.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(alloc::format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * c);
        for r in rows {
            if r.len() != c {
                return Err(Error::Shape(String::from("ragged rows")));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: n, cols: c, data })
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// self * other.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(alloc::format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for j in 0..other.cols {
                    out_row[j] += a * orow[j];
                }
            }
        }
        Ok(out)
    }

    /// self * other^T. Used for linear layers stored as [out, in].
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(alloc::format!(
                "matmul_nt {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let srow = self.row(i);
            for j in 0..other.rows {
                let orow = other.row(j);
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += srow[k] * orow[k];
                }
                out.set(i, j, s);
            }
        }
        Ok(out)
    }

    /// self^T * other.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(alloc::format!(
                "matmul_tn ({}x{})^T * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let srow = self.row(r);
            let orow = other.row(r);
            for i in 0..self.cols {
                let a = srow[i];
                if a == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(i);
                for j in 0..other.cols {
                    out_row[j] += a * orow[j];
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(String::from("add: shape mismatch")));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// Columns [start, start+len) as a new matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }
}

/// A named weight tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub gradient: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let gradient = Matrix::zeros(value.rows, value.cols);
        Parameter { name: name.into(), value, gradient }
    }

    pub fn zero_grad(&mut self) {
        self.gradient.data.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(x: &Matrix) -> Result<Matrix> {
    if !x.is_finite() {
        return Err(Error::NonFinite(String::from("softmax_rows")));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(r);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = math::exp(v - max);
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Row-wise log-softmax; numerically safe companion to [`softmax_rows`].
pub fn log_softmax_rows(x: &Matrix) -> Result<Matrix> {
    if !x.is_finite() {
        return Err(Error::NonFinite(String::from("log_softmax_rows")));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let lse = math::log_sum_exp(row.iter().copied());
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    Ok(out)
}

/// Layer normalization of a single row vector, population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    let d = x.len();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape(String::from("layer_norm: dimension mismatch")));
    }
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv = 1.0 / math::sqrt(var + eps);
    Ok(x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| g * (v - mean) * inv + b)
        .collect())
}

/// Layer-normalize every row of a matrix in place, returning a new matrix.
pub fn layer_norm_rows(x: &Matrix, gamma: &Matrix, beta: &Matrix, eps: f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let ln = layer_norm(x.row(r), gamma.row(0), beta.row(0), eps)?;
        out.row_mut(r).copy_from_slice(&ln);
    }
    Ok(out)
}

/// x * w^T + b, b broadcast over rows. w is [out, in], b is [1, out].
pub fn linear(x: &Matrix, w: &Parameter, b: &Parameter) -> Result<Matrix> {
    let mut out = x.matmul_nt(&w.value)?;
    if b.value.cols != out.cols {
        return Err(Error::Shape(String::from("linear: bias dimension mismatch")));
    }
    for r in 0..out.rows {
        for c in 0..out.cols {
            out.data[r * out.cols + c] += b.value.data[c];
        }
    }
    Ok(out)
}

/// Apply exact GELU elementwise.
pub fn gelu_matrix(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| math::gelu(v)).collect(),
    }
}

/// Standard bidirectional scaled dot-product attention, no mask.
///
/// `wq/wk/wv/wo` are [d, d] parameters (with [1, d] biases); heads share the
/// projections through column blocks of size d / n_heads.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    x: &Matrix,
    wq: &Parameter,
    bq: &Parameter,
    wk: &Parameter,
    bk: &Parameter,
    wv: &Parameter,
    bv: &Parameter,
    wo: &Parameter,
    bo: &Parameter,
    n_heads: usize,
) -> Result<Matrix> {
    let d = x.cols;
    if d % n_heads != 0 {
        return Err(Error::Config(alloc::format!(
            "hidden size {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let q = linear(x, wq, bq)?;
    let k = linear(x, wk, bk)?;
    let v = linear(x, wv, bv)?;
    let scale = 1.0 / math::sqrt(dh as f64);

    let mut concat = Matrix::zeros(x.rows, d);
    for h in 0..n_heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let vh = v.slice_cols(h * dh, dh);
        let scores = qh.matmul_nt(&kh)?.scale(scale);
        let attn = softmax_rows(&scores)?;
        let ctx = attn.matmul(&vh)?;
        for r in 0..x.rows {
            concat.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(ctx.row(r));
        }
    }
    linear(&concat, wo, bo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, rows: usize, cols: usize, data: Vec<f64>) -> Parameter {
        Parameter::new(name, Matrix::from_vec(rows, cols, data).unwrap())
    }

    #[test]
    fn softmax_symmetric_row() {
        let m = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert_eq!(s.data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_ln2_row() {
        let m = Matrix::from_vec(1, 2, vec![2.0_f64.ln(), 0.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!((s.data[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        let m = Matrix::from_vec(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn layer_norm_constant_row_centers_to_zero() {
        let out = layer_norm(&[3.0, 3.0, 3.0], &[1.0; 3], &[0.0; 3], 1e-12).unwrap();
        for v in out {
            assert!(v.abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_unit_variance_pair() {
        // mean 0, population variance 1, eps 0 -> unchanged
        let out = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15);
        assert!((out[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_gamma_zero_collapses_to_beta() {
        let out = layer_norm(&[5.0, -2.0, 0.3], &[0.0; 3], &[7.0, 8.0, 9.0], 1e-12).unwrap();
        assert_eq!(out, vec![7.0, 8.0, 9.0]);
    }

    #[test]
    fn layer_norm_dimension_mismatch() {
        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-12).is_err());
    }

    #[test]
    fn linear_identity() {
        let x = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = param("w", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = param("b", 1, 2, vec![0.0, 0.0]);
        assert_eq!(linear(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn linear_hand_product() {
        // x = [1, 2] (1x2), w = [[1, 3], [2, 4]] (out=2, in=2): x w^T = [7, 10]
        let x = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let w = param("w", 2, 2, vec![1.0, 3.0, 2.0, 4.0]);
        let b = param("b", 1, 2, vec![0.5, -0.5]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data, vec![7.5, 9.5]);
    }

    #[test]
    fn linear_zero_weight_gives_bias_rows() {
        let x = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = param("w", 2, 2, vec![0.0; 4]);
        let b = param("b", 1, 2, vec![1.5, -2.5]);
        let y = linear(&x, &w, &b).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &[1.5, -2.5]);
        }
    }

    #[test]
    fn attention_single_token() {
        // n=1: softmax over one key is 1, so out = wo (wv x + bv) + bo
        let x = Matrix::from_vec(1, 2, vec![0.3, -0.7]).unwrap();
        let wq = param("wq", 2, 2, vec![0.1, 0.2, -0.3, 0.4]);
        let wk = param("wk", 2, 2, vec![0.5, -0.1, 0.2, 0.3]);
        let wv = param("wv", 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let wo = param("wo", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let zb = |n: &str| param(n, 1, 2, vec![0.0, 0.0]);
        let out = multi_head_attention(
            &x, &wq, &zb("bq"), &wk, &zb("bk"), &wv, &zb("bv"), &wo, &zb("bo"), 1,
        )
        .unwrap();
        let v = linear(&x, &wv, &zb("bv")).unwrap();
        for c in 0..2 {
            assert!((out.get(0, c) - v.get(0, c)).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_identical_rows_identical_outputs() {
        let x = Matrix::from_rows(&[vec![0.2, -0.4], vec![0.2, -0.4], vec![0.2, -0.4]]).unwrap();
        let wq = param("wq", 2, 2, vec![0.1, 0.2, -0.3, 0.4]);
        let wk = param("wk", 2, 2, vec![0.5, -0.1, 0.2, 0.3]);
        let wv = param("wv", 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let wo = param("wo", 2, 2, vec![0.7, -0.2, 0.1, 0.9]);
        let zb = |n: &str| param(n, 1, 2, vec![0.1, -0.1]);
        let out = multi_head_attention(
            &x, &wq, &zb("bq"), &wk, &zb("bk"), &wv, &zb("bv"), &wo, &zb("bo"), 2,
        )
        .unwrap();
        for r in 1..3 {
            for c in 0..2 {
                assert!((out.get(r, c) - out.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_two_tokens_hand_oracle() {
        // n=2, d=2, 1 head, scalar arithmetic done independently below.
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let wq = param("wq", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let wk = param("wk", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let wv = param("wv", 2, 2, vec![2.0, 0.0, 0.0, 2.0]);
        let wo = param("wo", 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let zb = |n: &str| param(n, 1, 2, vec![0.0, 0.0]);
        let out = multi_head_attention(
            &x, &wq, &zb("bq"), &wk, &zb("bk"), &wv, &zb("bv"), &wo, &zb("bo"), 1,
        )
        .unwrap();
        // scores row 0: [1,0]/sqrt(2); softmax = [e^s/(e^s+1), 1/(e^s+1)], s=1/sqrt 2
        let s = 1.0 / 2.0_f64.sqrt();
        let a = s.exp() / (s.exp() + 1.0);
        // ctx row 0 = a*[2,0] + (1-a)*[0,2]
        assert!((out.get(0, 0) - 2.0 * a).abs() < 1e-12);
        assert!((out.get(0, 1) - 2.0 * (1.0 - a)).abs() < 1e-12);
        assert!((out.get(1, 0) - 2.0 * (1.0 - a)).abs() < 1e-12);
        assert!((out.get(1, 1) - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn attention_indivisible_heads_rejected() {
        let x = Matrix::zeros(1, 3);
        let w = |n: &str| param(n, 3, 3, vec![0.0; 9]);
        let b = |n: &str| param(n, 1, 3, vec![0.0; 3]);
        let r = multi_head_attention(
            &x, &w("q"), &b("bq"), &w("k"), &b("bk"), &w("v"), &b("bv"), &w("o"), &b("bo"), 2,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
