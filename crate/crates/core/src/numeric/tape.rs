//! Reverse-mode differentiation over coarse tensor operations.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar result walks the record in reverse and
//! returns the gradient of every node that depends on a leaf. A tape lives
//! for one forward/backward pass; dropping it frees the whole graph.
//!
//! Shape errors inside tape operations are programming errors and panic.
//! Public model entry points validate their inputs before recording.

use std::borrow::Cow;

use super::kernels::{self, ScanInputs, ScanTrace};
use super::tensor::matmul_into;
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Silu(Var),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    GroupMax {
        x: Var,
        cols: usize,
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Tensor,
    },
    Chamfer {
        p: Var,
        q: Var,
        nearest_in_q: Vec<usize>,
        nearest_in_p: Vec<usize>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
    },
    Scan {
        operands: [Var; 6],
        trace: ScanTrace,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input owned by the tape.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.leaf_cow(Cow::Owned(value), true)
    }

    /// Differentiable input borrowed from outside the tape (model weights).
    pub fn leaf_ref(&mut self, value: &'a Tensor) -> Var {
        self.leaf_cow(Cow::Borrowed(value), true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf_cow(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.leaf_cow(Cow::Borrowed(value), false)
    }

    fn leaf_cow(&mut self, value: Cow<'a, Tensor>, needs_grad: bool) -> Var {
        let op = if needs_grad { Op::Leaf } else { Op::Constant };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "{name}: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("elementwise shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, "add", |p, q| p + q);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, "sub", |p, q| p - q);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, "mul", |p, q| p * q);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `x + row`, broadcasting a `cols`-element row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let cols = self.value(x).cols();
        assert_eq!(self.value(row).len(), cols, "add_row: width mismatch");
        let mut v = self.value(x).clone();
        let r = self.value(row).data();
        for chunk in v.data_mut().chunks_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(x, row), &[x, row])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * kernels::sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = kernels::softmax_rows_unchecked(self.value(a));
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise layer normalization with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let cols = self.value(x).cols();
        assert_eq!(self.value(gain).len(), cols, "layer_norm: gain width");
        assert_eq!(self.value(bias).len(), cols, "layer_norm: bias width");
        let (out, xhat, inv_std) =
            kernels::layer_norm_forward(self.value(x), self.value(gain).data(), self.value(bias).data(), eps);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let cols = t.cols();
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let v = Tensor::new(vec![t.rows(), len], data).expect("slice shape");
        self.push(v, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows(), rows, "concat_cols: row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let v = Tensor::new(vec![rows, total], data).expect("concat shape");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), cols, "concat_rows: width mismatch");
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let v = Tensor::new(vec![rows, cols], data).expect("concat shape");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row gather; indices may repeat (used for broadcasting a row).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let t = self.value(x);
        let mut data = Vec::with_capacity(index.len() * t.cols());
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![index.len(), t.cols()], data).expect("gather shape");
        self.push(
            v,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let n = self.value(x).rows();
        let index: Vec<usize> = (0..n).rev().collect();
        self.gather_rows(x, &index)
    }

    /// Column-wise maximum over rows, `1 × cols`. Ties go to the first row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let rows = self.value(x).rows();
        self.group_max(x, rows)
    }

    /// Column-wise maximum over consecutive blocks of `group` rows, giving
    /// `rows/group × cols`. Ties go to the first row of the block.
    pub fn group_max(&mut self, x: Var, group: usize) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        assert!(
            group > 0 && rows % group == 0,
            "group_max: {rows} rows in groups of {group}"
        );
        let blocks = rows / group;
        let mut best = Vec::with_capacity(blocks * cols);
        let mut argmax = Vec::with_capacity(blocks * cols);
        for blk in 0..blocks {
            let first = blk * group;
            let start = best.len();
            best.extend_from_slice(t.row(first));
            argmax.extend(std::iter::repeat_n(first, cols));
            for r in first + 1..first + group {
                for (c, &v) in t.row(r).iter().enumerate() {
                    if v > best[start + c] {
                        best[start + c] = v;
                        argmax[start + c] = r;
                    }
                }
            }
        }
        let v = Tensor::new(vec![blocks, cols], best).expect("group_max shape");
        self.push(v, Op::GroupMax { x, cols, argmax }, &[x])
    }

    /// Column-wise mean over rows, `1 × cols`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut acc = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (a, v) in acc.iter_mut().zip(t.row(r)) {
                *a += v;
            }
        }
        let inv = 1.0 / t.rows() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        let v = Tensor::row_vector(&acc);
        self.push(v, Op::MeanRows(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape size mismatch");
        self.push(v, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    /// Softmax cross-entropy of a single row of logits against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), 1, "cross_entropy expects one row of logits");
        assert!(target < t.cols(), "cross_entropy target out of range");
        let probs = kernels::softmax_rows_unchecked(t);
        let row = t.row(0);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - row[target];
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, target, probs },
            &[logits],
        )
    }

    /// Symmetric Chamfer distance between `k × 3` point sets.
    pub fn chamfer(&mut self, p: Var, q: Var) -> Var {
        let (d, nearest_in_q, nearest_in_p) = kernels::chamfer_matches(self.value(p), self.value(q));
        self.push(
            Tensor::scalar(d),
            Op::Chamfer {
                p,
                q,
                nearest_in_q,
                nearest_in_p,
            },
            &[p, q],
        )
    }

    /// Depthwise causal convolution, see [`kernels::depthwise_conv`].
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        assert_eq!(self.value(w).rows(), self.value(x).cols(), "conv channels");
        let v = kernels::depthwise_conv(self.value(x), self.value(w), self.value(b).data());
        self.push(v, Op::Conv { x, w, b }, &[x, w, b])
    }

    /// Selective scan, see [`kernels::selective_scan`]. Operands are
    /// `(u, delta, a, b, c, d)`.
    pub fn selective_scan(&mut self, operands: [Var; 6]) -> Var {
        let inputs = self.scan_inputs(&operands);
        inputs.dims().expect("selective scan operands");
        let (y, trace) = kernels::selective_scan_traced(inputs);
        self.push(y, Op::Scan { operands, trace }, &operands)
    }

    fn scan_inputs(&self, ops: &[Var; 6]) -> ScanInputs<'_> {
        ScanInputs {
            u: self.value(ops[0]),
            delta: self.value(ops[1]),
            a: self.value(ops[2]),
            b: self.value(ops[3]),
            c: self.value(ops[4]),
            d: self.value(ops[5]).data(),
        }
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("initialized"));
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip(g, vb, |x, y| x * y);
                let gb = zip(g, va, |x, y| x * y);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate_with(grads, *row, |acc| {
                    let cols = g.cols();
                    for chunk in g.data().chunks(cols) {
                        for (a, v) in acc.data_mut().iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = G · Bᵀ, dB = Aᵀ · G
                self.accumulate_with(grads, *a, |acc| {
                    let bt = vb.transpose();
                    matmul_into(g.data(), bt.data(), acc.data_mut(), m, n, k);
                });
                self.accumulate_with(grads, *b, |acc| {
                    let at = va.transpose();
                    matmul_into(at.data(), g.data(), acc.data_mut(), k, m, n);
                });
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Silu(a) => {
                let d = zip(g, self.value(*a), |gv, x| {
                    let s = kernels::sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                });
                self.accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = zip(g, self.value(*a), |gv, x| gv * kernels::gelu_grad(x));
                self.accumulate(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = zip(g, self.value(*a), |gv, x| gv * kernels::sigmoid(x));
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip(g, out, |gv, y| gv * y)),
            Op::SoftmaxRows(a) => {
                let mut d = g.clone();
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((dv, yv), gv) in d.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gamma = self.value(*gain).data();
                let cols = g.cols();
                let mut dx = Tensor::zeros(g.shape());
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let xh = xhat.row(r);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_xh = 0.0;
                    for j in 0..cols {
                        dgain[j] += gr[j] * xh[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gamma[j];
                        mean_dh += dh;
                        mean_dh_xh += dh * xh[j];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_xh /= cols as f64;
                    let dxr = dx.row_mut(r);
                    for j in 0..cols {
                        let dh = gr[j] * gamma[j];
                        dxr[j] = inv_std[r] * (dh - mean_dh - xh[j] * mean_dh_xh);
                    }
                }
                self.accumulate(grads, *x, dx);
                let gs = self.shape(*gain).to_vec();
                let bs = self.shape(*bias).to_vec();
                self.accumulate(grads, *gain, Tensor::new(gs, dgain).expect("gain"));
                self.accumulate(grads, *bias, Tensor::new(bs, dbias).expect("bias"));
            }
            Op::SliceCols { x, start } => {
                let width = g.cols();
                self.accumulate_with(grads, *x, |acc| {
                    for r in 0..g.rows() {
                        let dst = &mut acc.row_mut(r)[*start..*start + width];
                        for (d, v) in dst.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).cols();
                    self.accumulate_with(grads, *p, |acc| {
                        for r in 0..g.rows() {
                            let src = &g.row(r)[offset..offset + width];
                            for (d, v) in acc.row_mut(r).iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    });
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate_with(grads, *p, |acc| {
                        for (d, v) in acc.data_mut().iter_mut().zip(&g.data()[offset..]) {
                            *d += v;
                        }
                    });
                    offset += n;
                }
            }
            Op::GatherRows { x, index } => {
                self.accumulate_with(grads, *x, |acc| {
                    for (r, &src) in index.iter().enumerate() {
                        let row = g.row(r);
                        for (d, v) in acc.row_mut(src).iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
            }
            Op::GroupMax { x, cols, argmax } => {
                self.accumulate_with(grads, *x, |acc| {
                    for (k, &r) in argmax.iter().enumerate() {
                        acc.data_mut()[r * cols + k % cols] += g.data()[k];
                    }
                });
            }
            Op::MeanRows(x) => {
                let rows = self.value(*x).rows();
                let inv = 1.0 / rows as f64;
                self.accumulate_with(grads, *x, |acc| {
                    for r in 0..rows {
                        for (d, v) in acc.row_mut(r).iter_mut().zip(g.data()) {
                            *d += v * inv;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                let back = g.clone().reshape(&shape).expect("reshape back");
                self.accumulate(grads, *x, back);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::CrossEntropy { logits, target, probs } => {
                let s = g.data()[0];
                let mut d = probs.map(|p| p * s);
                d.data_mut()[*target] -= s;
                self.accumulate(grads, *logits, d);
            }
            Op::Chamfer {
                p,
                q,
                nearest_in_q,
                nearest_in_p,
            } => {
                let s = g.data()[0];
                let (vp, vq) = (self.value(*p), self.value(*q));
                let (na, nb) = (vp.rows() as f64, vq.rows() as f64);
                let mut dp = Tensor::zeros(vp.shape());
                let mut dq = Tensor::zeros(vq.shape());
                for (i, &j) in nearest_in_q.iter().enumerate() {
                    for k in 0..3 {
                        let diff = vp.at(i, k) - vq.at(j, k);
                        dp.data_mut()[i * 3 + k] += 2.0 * diff * s / na;
                        dq.data_mut()[j * 3 + k] -= 2.0 * diff * s / na;
                    }
                }
                for (j, &i) in nearest_in_p.iter().enumerate() {
                    for k in 0..3 {
                        let diff = vq.at(j, k) - vp.at(i, k);
                        dq.data_mut()[j * 3 + k] += 2.0 * diff * s / nb;
                        dp.data_mut()[i * 3 + k] -= 2.0 * diff * s / nb;
                    }
                }
                self.accumulate(grads, *p, dp);
                self.accumulate(grads, *q, dq);
            }
            Op::Conv { x, w, b } => {
                let (dx, dw, db) = kernels::depthwise_conv_backward(self.value(*x), self.value(*w), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                let bs = self.shape(*b).to_vec();
                self.accumulate(grads, *b, db.reshape(&bs).expect("conv bias"));
            }
            Op::Scan { operands, trace } => {
                let sg = kernels::selective_scan_backward(self.scan_inputs(operands), trace, g);
                let [u, delta, a, b, c, d] = *operands;
                self.accumulate(grads, u, sg.u);
                self.accumulate(grads, delta, sg.delta);
                self.accumulate(grads, a, sg.a);
                self.accumulate(grads, b, sg.b);
                self.accumulate(grads, c, sg.c);
                let ds = self.shape(d).to_vec();
                self.accumulate(grads, d, sg.d.reshape(&ds).expect("scan skip"));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(&[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(&[1.0, 2.0]));
        let c = tape.constant(Tensor::row_vector(&[3.0, 4.0]));
        let y = tape.mul(x, c);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn gather_with_repeats_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let y = tape.gather_rows(x, &[0, 0, 1]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_shapes_match_leaves() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1));
        let b = tape.leaf(Tensor::from_fn(&[4, 2], |i| 1.0 - i as f64 * 0.2));
        let bias = tape.leaf(Tensor::from_fn(&[2], |i| i as f64));
        let m = tape.matmul(a, b);
        let m = tape.add_row(m, bias);
        let s = tape.softmax_rows(m);
        let loss = tape.sum(s);
        let grads = tape.backward(loss);
        for v in [a, b, bias] {
            assert_eq!(grads.get(v).unwrap().shape(), tape.shape(v));
        }
    }
}
