//! Reverse-mode autodiff over the handful of ops the encoder needs.
//!
//! The tape records one node per intermediate matrix during the forward
//! pass; `backward` walks the nodes in reverse and accumulates gradients.
//! This is deliberately not a general autodiff: the op set is exactly what
//! the fixed MLM architecture uses, which keeps every backward rule small
//! enough to check against central finite differences.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::{softmax_rows, Matrix};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    GatherRows { table: Var, ids: Vec<usize> },
    Add { a: Var, b: Var },
    AddBiasRow { x: Var, bias: Var },
    Scale { x: Var, s: f64 },
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    SoftmaxRows { x: Var },
    LayerNormRows { x: Var, gamma: Var, beta: Var, eps: f64 },
    Gelu { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    /// Mean negative log-likelihood over (row, class) targets.
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)> },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Matrix>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: None }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Result<&Matrix> {
        self.grads
            .as_ref()
            .map(|g| &g[v.0])
            .ok_or_else(|| Error::State(String::from("gradient read before backward")))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let cols = t.cols;
        let mut out = Matrix::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows {
                return Err(Error::InvalidId(id));
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(out, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    /// x + bias broadcast over rows; bias is 1 x cols.
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.rows != 1 || bv.cols != xv.cols {
            return Err(Error::Shape(String::from("add_bias_row: bias shape")));
        }
        let mut out = xv.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += bv.data[c];
            }
        }
        Ok(self.push(out, Op::AddBiasRow { x, bias }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale { x, s })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul { a, b }))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNT { a, b }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = softmax_rows(self.value(x))?;
        Ok(self.push(v, Op::SoftmaxRows { x }))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = crate::matrix::layer_norm_rows(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(v, Op::LayerNormRows { x, gamma, beta, eps }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = crate::matrix::gelu_matrix(self.value(x));
        self.push(v, Op::Gelu { x })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_cols(start, len);
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows != rows {
                return Err(Error::Shape(String::from("concat_cols: row mismatch")));
            }
            for r in 0..rows {
                out.row_mut(r)[at..at + pv.cols].copy_from_slice(pv.row(r));
            }
            at += pv.cols;
        }
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// x * w^T + b; w is [out, in], b is [1, out].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul_nt(x, w)?;
        self.add_bias_row(xw, b)
    }

    /// Mean cross-entropy of `logits` rows against the given (row, class)
    /// targets; returns a 1x1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Domain(String::from("cross_entropy: no targets")));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for &(row, class) in targets {
            if row >= lv.rows || class >= lv.cols {
                return Err(Error::Index(String::from("cross_entropy: target out of range")));
            }
            let lse = math::log_sum_exp(lv.row(row).iter().copied());
            total -= lv.get(row, class) - lse;
        }
        let value = Matrix::from_vec(1, 1, vec![total / targets.len() as f64])?;
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec() }))
    }

    /// Backpropagate from `loss` (must be 1x1) with upstream gradient 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).rows != 1 || self.value(loss).cols != 1 {
            return Err(Error::Shape(String::from("backward: loss must be 1x1")));
        }
        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows, n.value.cols))
            .collect();
        grads[loss.0].data[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let g = grads[i].clone();
            if g.data.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::GatherRows { table, ids } => {
                    for (r, &id) in ids.iter().enumerate() {
                        let cols = g.cols;
                        for c in 0..cols {
                            grads[table.0].data[id * cols + c] += g.data[r * cols + c];
                        }
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::AddBiasRow { x, bias } => {
                    accumulate(&mut grads[x.0], &g);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            grads[bias.0].data[c] += g.get(r, c);
                        }
                    }
                }
                Op::Scale { x, s } => {
                    let scaled = g.scale(*s);
                    accumulate(&mut grads[x.0], &scaled);
                }
                Op::MatMul { a, b } => {
                    let ga = g.matmul_nt(&self.nodes[b.0].value)?;
                    let gb = self.nodes[a.0].value.matmul_tn(&g)?;
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::MatMulNT { a, b } => {
                    let ga = g.matmul(&self.nodes[b.0].value)?;
                    let gb = g.matmul_tn(&self.nodes[a.0].value)?;
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::SoftmaxRows { x } => {
                    // s = value; gx = s .* (g - (g . s))
                    let s = &self.nodes[i].value;
                    let mut gx = Matrix::zeros(s.rows, s.cols);
                    for r in 0..s.rows {
                        let dot: f64 = g.row(r).iter().zip(s.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..s.cols {
                            gx.set(r, c, s.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let xv = &self.nodes[x.0].value;
                    let gm = &self.nodes[gamma.0].value;
                    let d = xv.cols as f64;
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    let mut ggamma = Matrix::zeros(1, xv.cols);
                    let mut gbeta = Matrix::zeros(1, xv.cols);
                    for r in 0..xv.rows {
                        let row = xv.row(r);
                        let mean = row.iter().sum::<f64>() / d;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let inv = 1.0 / math::sqrt(var + eps);
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let gh: Vec<f64> = (0..xv.cols)
                            .map(|c| g.get(r, c) * gm.data[c])
                            .collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_gh_xhat: f64 =
                            gh.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for c in 0..xv.cols {
                            ggamma.data[c] += g.get(r, c) * xhat[c];
                            gbeta.data[c] += g.get(r, c);
                            gx.set(
                                r,
                                c,
                                inv / d * (d * gh[c] - sum_gh - xhat[c] * sum_gh_xhat),
                            );
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                    accumulate(&mut grads[gamma.0], &ggamma);
                    accumulate(&mut grads[beta.0], &gbeta);
                }
                Op::Gelu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for (o, (&gi, &xi)) in gx.data.iter_mut().zip(g.data.iter().zip(&xv.data)) {
                        *o = gi * math::gelu_grad(xi);
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::SliceCols { x, start } => {
                    let cols = grads[x.0].cols;
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            grads[x.0].data[r * cols + start + c] += g.get(r, c);
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let pcols = grads[p.0].cols;
                        for r in 0..g.rows {
                            for c in 0..pcols {
                                grads[p.0].data[r * pcols + c] += g.get(r, at + c);
                            }
                        }
                        at += pcols;
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let lv = &self.nodes[logits.0].value;
                    let upstream = g.data[0] / targets.len() as f64;
                    let probs = softmax_rows(lv)?;
                    let mut gl = Matrix::zeros(lv.rows, lv.cols);
                    for &(row, class) in targets {
                        for c in 0..lv.cols {
                            let p = probs.get(row, c);
                            let delta = if c == class { 1.0 } else { 0.0 };
                            gl.data[row * lv.cols + c] += (p - delta) * upstream;
                        }
                    }
                    accumulate(&mut grads[logits.0], &gl);
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }
}

fn accumulate(dst: &mut Matrix, src: &Matrix) {
    debug_assert_eq!(dst.rows, src.rows);
    debug_assert_eq!(dst.cols, src.cols);
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_before_backward_is_state_error() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(1, 1));
        assert!(matches!(t.grad(x), Err(Error::State(_))));
    }

    #[test]
    fn bias_gradient_of_summed_linear_is_ones() {
        // loss = mean CE is not needed; use sum via matmul with ones.
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let w = t.leaf(Matrix::from_vec(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap());
        let b = t.leaf(Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap());
        let y = t.linear(x, w, b).unwrap();
        // sum(y) = ones_row * y * ones_col
        let ones_l = t.leaf(Matrix::from_vec(1, 3, vec![1.0; 3]).unwrap());
        let ones_r = t.leaf(Matrix::from_vec(2, 1, vec![1.0; 2]).unwrap());
        let s1 = t.matmul(ones_l, y).unwrap();
        let loss = t.matmul(s1, ones_r).unwrap();
        t.backward(loss).unwrap();
        // d sum / d b_c = number of rows
        assert_eq!(t.grad(b).unwrap().data, vec![3.0, 3.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(1, 1, vec![2.0]).unwrap());
        let unused = t.leaf(Matrix::from_vec(1, 1, vec![5.0]).unwrap());
        let loss = t.scale(x, 3.0);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(unused).unwrap().data, vec![0.0]);
        assert_eq!(t.grad(x).unwrap().data, vec![3.0]);
    }

    // Finite-difference checks for individual ops, exercised through a scalar
    // loss built from cross_entropy (covers its backward too).
    fn fd_check<F>(shape: (usize, usize), build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let (rows, cols) = shape;
        let mut base = Matrix::zeros(rows, cols);
        // deterministic, non-symmetric fill
        for (i, v) in base.data.iter_mut().enumerate() {
            *v = ((i as f64) * 0.7).sin() * 0.9;
        }
        let eval = |m: &Matrix| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(m.clone());
            let out = build(&mut t, x);
            t.value(out).data[0]
        };
        let mut t = Tape::new();
        let x = t.leaf(base.clone());
        let out = build(&mut t, x);
        t.backward(out).unwrap();
        let analytic = t.grad(x).unwrap().clone();
        let eps = 1e-5;
        for i in 0..base.data.len() {
            let mut plus = base.clone();
            plus.data[i] += eps;
            let mut minus = base.clone();
            minus.data[i] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data[i];
            let denom = fd.abs().max(a.abs()).max(1e-8);
            assert!(
                (fd - a).abs() / denom < 1e-4,
                "elem {i}: fd={fd} analytic={a}"
            );
        }
    }

    #[test]
    fn softmax_and_ce_gradients_match_finite_difference() {
        fd_check((2, 3), |t, x| t.cross_entropy(x, &[(0, 1), (1, 2)]).unwrap());
    }

    #[test]
    fn gelu_gradient_matches_finite_difference() {
        fd_check((2, 3), |t, x| {
            let gl = t.gelu(x);
            t.cross_entropy(gl, &[(0, 0), (1, 1)]).unwrap()
        });
    }

    #[test]
    fn layer_norm_gradient_matches_finite_difference() {
        fd_check((2, 4), |t, x| {
            let gamma = t.leaf(Matrix::from_vec(1, 4, vec![1.1, 0.9, -0.5, 1.3]).unwrap());
            let beta = t.leaf(Matrix::from_vec(1, 4, vec![0.1, -0.2, 0.3, 0.0]).unwrap());
            let ln = t.layer_norm_rows(x, gamma, beta, 1e-12).unwrap();
            t.cross_entropy(ln, &[(0, 2), (1, 0)]).unwrap()
        });
    }

    #[test]
    fn matmul_and_concat_gradients_match_finite_difference() {
        fd_check((2, 4), |t, x| {
            let left = t.slice_cols(x, 0, 2);
            let right = t.slice_cols(x, 2, 2);
            let prod = t.matmul_nt(left, right).unwrap();
            let sm = t.softmax_rows(prod).unwrap();
            let mixed = t.matmul(sm, right).unwrap();
            let cat = t.concat_cols(&[mixed, left]).unwrap();
            t.cross_entropy(cat, &[(0, 3), (1, 1)]).unwrap()
        });
    }

    #[test]
    fn gather_rows_gradient_accumulates_repeats() {
        let mut t = Tape::new();
        let table = t.leaf(Matrix::from_vec(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let g = t.gather_rows(table, &[1, 1, 0]).unwrap();
        let loss = t.cross_entropy(g, &[(0, 0), (1, 1), (2, 0)]).unwrap();
        t.backward(loss).unwrap();
        // row 2 of the table is untouched
        let grad = t.grad(table).unwrap();
        assert_eq!(grad.row(2), &[0.0, 0.0]);
        assert!(grad.row(0).iter().any(|&v| v != 0.0));
        assert!(grad.row(1).iter().any(|&v| v != 0.0));
    }
}
