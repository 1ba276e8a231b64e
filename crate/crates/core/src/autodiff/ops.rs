use std::rc::Rc;

use super::kernels::{axis_split, dot, matmul_into};
use super::{Graph, Op, Var, Windows};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn unary(g: &Graph<'_>, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
    let t = g.value(x);
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn require_matrix(g: &Graph<'_>, op: &'static str, x: Var) -> Result<(usize, usize)> {
    match *g.shape(x) {
        [r, c] => Ok((r, c)),
        ref s => Err(dim_err(op, s, &[])),
    }
}

impl Graph<'_> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_matrix(self, "matmul", a)?;
        let (k2, n) = require_matrix(self, "matmul", b)?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector to every row (last axis).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let tb = self.value(bias);
        if tb.len() != tx.cols() {
            return Err(dim_err("add_bias", tx.shape(), tb.shape()));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                for (v, b) in row.iter_mut().zip(tb.data()) {
                    *v += b;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = unary(self, x, |v| v * s);
        self.push(t, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a constant array of the same size.
    pub(crate) fn mul_const(&mut self, x: Var, c: Rc<Vec<f64>>) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().zip(c.iter()).map(|(a, b)| a * b).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::MulConst(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = unary(self, x, |v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = unary(self, x, f64::tanh);
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = unary(self, x, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} for shape {:?}",
                tx.shape()
            )));
        }
        let (outer, len, inner) = axis_split(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| o * len * inner + t * inner + i;
                let max = (0..len)
                    .map(|t| src[at(t)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for t in 0..len {
                    let e = (src[at(t)] - max).exp();
                    out[at(t)] = e;
                    sum += e;
                }
                for t in 0..len {
                    out[at(t)] /= sum;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        if c > 0 {
            for row in out.chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    /// Row-wise standardization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(dim_err("layer_norm", tx.shape(), self.value(gain).shape()));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gd[c] + bd[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Concatenates 1-D or 2-D tensors along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        let rank = self.value(first).rank();
        for &p in parts {
            if self.value(p).rows() != rows || self.value(p).rank() != rank {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if rank == 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != cols {
                return Err(dim_err("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `start..end` of a matrix (half-open).
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = require_matrix(self, "slice_rows", x)?;
        if start > end || end > r {
            return Err(Error::Bounds {
                op: "slice_rows",
                index: end.max(start),
                limit: r,
            });
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::new(vec![end - start, c], data)?;
        Ok(self.push(t, Op::SliceRows(x, start), &[x]))
    }

    /// Columns `start..end` of a matrix (half-open).
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = require_matrix(self, "slice_cols", x)?;
        if start > end || end > c {
            return Err(Error::Bounds {
                op: "slice_cols",
                index: end.max(start),
                limit: c,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, end - start], data)?;
        Ok(self.push(t, Op::SliceCols(x, start), &[x]))
    }

    /// Sum of all elements, as a shape-`[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::Contract(format!(
                "reduce axis {axis} for shape {:?}",
                tx.shape()
            )));
        }
        let (outer, len, inner) = axis_split(tx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let src = tx.data();
        for o in 0..outer {
            for t in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[o * len * inner + t * inner + i];
                }
            }
        }
        if mean && len > 0 {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
                mean,
            },
            &[x],
        ))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = require_matrix(self, "transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    /// Selects rows of `table` by index; gradients flow into the selected rows.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = require_matrix(self, "gather_rows", table)?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Bounds {
                    op: "gather_rows",
                    index: i,
                    limit: r,
                });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![indices.len(), c], out)?;
        Ok(self.push(
            t,
            Op::GatherRows(table, Rc::new(indices.to_vec())),
            &[table],
        ))
    }

    /// Embedding lookup: one table row per token id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Repeats a vector (or single-row matrix) `count` times as rows.
    pub fn repeat_rows(&mut self, v: Var, count: usize) -> Var {
        let tv = self.value(v);
        let c = tv.len();
        let mut out = Vec::with_capacity(count * c);
        for _ in 0..count {
            out.extend_from_slice(tv.data());
        }
        let t = Tensor::new(vec![count, c], out).expect("consistent");
        self.push(t, Op::RepeatRows(v), &[v])
    }

    /// Multi-head scaled dot-product attention on already projected inputs.
    ///
    /// Query row `r` attends to key/value rows `windows[r].0 ..
    /// windows[r].0 + windows[r].1`. Heads split the feature axis into
    /// `heads` equal slices; outputs are concatenated per row.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        windows: Windows,
    ) -> Result<Var> {
        let (m, d) = require_matrix(self, "window_attention", q)?;
        let (n, dk) = require_matrix(self, "window_attention", k)?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(dim_err("window_attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{d} features not divisible by {heads} heads"
            )));
        }
        if windows.len() != m {
            return Err(dim_err("window_attention", &[m], &[windows.len()]));
        }
        for &(s, len) in windows.iter() {
            if len == 0 || s + len > n {
                return Err(Error::Bounds {
                    op: "window_attention",
                    index: s + len,
                    limit: n,
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let total: usize = windows.iter().map(|w| w.1).sum::<usize>() * heads;
        let mut probs = Vec::with_capacity(total);
        let mut out = vec![0.0; m * d];
        for (r, &(s, len)) in windows.iter().enumerate() {
            for h in 0..heads {
                let qh = &qd[r * d + h * dh..r * d + (h + 1) * dh];
                let base = probs.len();
                let mut max = f64::NEG_INFINITY;
                for t in 0..len {
                    let kr = (s + t) * d + h * dh;
                    let sc = dot(qh, &kd[kr..kr + dh]) * scale;
                    max = max.max(sc);
                    probs.push(sc);
                }
                let mut sum = 0.0;
                for p in &mut probs[base..] {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                for p in &mut probs[base..] {
                    *p /= sum;
                }
                let orow = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
                for t in 0..len {
                    let w = probs[base + t];
                    let vr = (s + t) * d + h * dh;
                    for (o, &vv) in orow.iter_mut().zip(&vd[vr..vr + dh]) {
                        *o += w * vv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![m, d], out)?;
        Ok(self.push(
            t,
            Op::WindowAttention {
                q,
                k,
                v,
                heads,
                windows,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities recorded by a [`Graph::window_attention`]
    /// node: for each query row, `heads` consecutive weight vectors.
    pub fn attention_weights(&self, node: Var) -> Option<Vec<Vec<f64>>> {
        match &self.nodes[node.0].op {
            Op::WindowAttention {
                heads,
                windows,
                probs,
                ..
            } => {
                let mut out = Vec::new();
                let mut at = 0;
                for &(_, len) in windows.iter() {
                    for _ in 0..*heads {
                        out.push(probs[at..at + len].to_vec());
                        at += len;
                    }
                }
                Some(out)
            }
            _ => None,
        }
    }

    fn window_rows(&self, op: &'static str, x: Var, width: usize) -> Result<(usize, usize)> {
        let (t, d) = require_matrix(self, op, x)?;
        if width == 0 {
            return Err(Error::Contract(format!("{op}: zero window")));
        }
        Ok(((t + 1).saturating_sub(width), d))
    }

    /// Coordinate-wise max over every window of `width` consecutive rows.
    pub fn window_max(&mut self, x: Var, width: usize) -> Result<Var> {
        let (rows, d) = self.window_rows("window_max", x, width)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * d];
        let mut argmax = vec![0; rows * d];
        for i in 0..rows {
            for c in 0..d {
                let mut best = i;
                for r in i + 1..i + width {
                    if src[r * d + c] > src[best * d + c] {
                        best = r;
                    }
                }
                out[i * d + c] = src[best * d + c];
                argmax[i * d + c] = best;
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(t, Op::WindowMax { x, argmax }, &[x]))
    }

    /// Mean over every window of `width` consecutive rows.
    pub fn window_mean(&mut self, x: Var, width: usize) -> Result<Var> {
        let (rows, d) = self.window_rows("window_mean", x, width)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * d];
        for i in 0..rows {
            for r in i..i + width {
                for c in 0..d {
                    out[i * d + c] += src[r * d + c];
                }
            }
            for c in 0..d {
                out[i * d + c] /= width as f64;
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(t, Op::WindowMean { x, width }, &[x]))
    }

    /// For each window of `width` rows: softmax over the per-row `scores`
    /// restricted to the window, then the weighted sum of the rows of `x`.
    pub fn window_softmax_pool(&mut self, scores: Var, x: Var, width: usize) -> Result<Var> {
        let (rows, d) = self.window_rows("window_softmax_pool", x, width)?;
        let t_len = self.value(x).rows();
        if self.value(scores).len() != t_len {
            return Err(dim_err(
                "window_softmax_pool",
                self.shape(scores),
                self.shape(x),
            ));
        }
        let (sd, xd) = (self.value(scores).data(), self.value(x).data());
        let mut weights = Vec::with_capacity(rows * width);
        let mut out = vec![0.0; rows * d];
        for i in 0..rows {
            let win = &sd[i..i + width];
            let max = win.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = win.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (t, e) in exps.into_iter().enumerate() {
                let w = e / sum;
                weights.push(w);
                let r = i + t;
                for c in 0..d {
                    out[i * d + c] += w * xd[r * d + c];
                }
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            t,
            Op::WindowSoftmaxPool {
                scores,
                x,
                width,
                weights,
            },
            &[scores, x],
        ))
    }

    /// Row-wise bilinear form: `out[r, c] = hs[r]ᵀ · U[:, c, :] · he[r]`
    /// with `U` of shape `[p, classes, p]`.
    pub fn bilinear(&mut self, hs: Var, u: Var, he: Var) -> Result<Var> {
        let (n, p) = require_matrix(self, "bilinear", hs)?;
        let us = self.shape(u).to_vec();
        if self.shape(he) != [n, p] || us.len() != 3 || us[0] != p || us[2] != p {
            return Err(dim_err("bilinear", self.shape(hs), &us));
        }
        let classes = us[1];
        let (hd, ud, ed) = (
            self.value(hs).data(),
            self.value(u).data(),
            self.value(he).data(),
        );
        let mut out = vec![0.0; n * classes];
        for r in 0..n {
            let hr = &hd[r * p..(r + 1) * p];
            let er = &ed[r * p..(r + 1) * p];
            for (a, &ha) in hr.iter().enumerate() {
                if ha == 0.0 {
                    continue;
                }
                for c in 0..classes {
                    let urow = &ud[(a * classes + c) * p..(a * classes + c + 1) * p];
                    out[r * classes + c] += ha * dot(urow, er);
                }
            }
        }
        let t = Tensor::new(vec![n, classes], out)?;
        Ok(self.push(t, Op::Bilinear { hs, u, he }, &[hs, u, he]))
    }
}
