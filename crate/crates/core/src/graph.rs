//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape built during one forward pass. Each operation pushes
//! a node that remembers its inputs; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for every node that depends on a
//! trainable leaf. Graphs are cheap to create and are built fresh per sample.

use crate::error::{Error, Result};
use crate::ssm::{self, Discretization, ScanInputs};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<f64>,
    },
    SoftmaxRows(Var),
    Transpose(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ReverseRows(Var),
    CausalConv {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Scan(Box<ScanNode>),
    Sum(Var),
    L1Loss {
        pred: Var,
        target: Tensor,
    },
    CrossEntropy {
        logits: Var,
        class: usize,
        probs: Vec<f64>,
        clamped: bool,
    },
    BceWithLogits {
        logit: Var,
        target: f64,
    },
}

struct ScanNode {
    u: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    c: Var,
    d_skip: Var,
    rule: Discretization,
    a: Vec<f64>,
    states: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul {:?} x {:?}", va.shape(), vb.shape());
        let out = va.matmul(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add");
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `x + bias` with a `(1, cols)` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        assert_eq!(vb.rows(), 1, "add_row bias must be a row vector");
        assert_eq!(vx.cols(), vb.cols(), "add_row");
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddRow(x, bias), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data).expect("shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    /// Row-wise RMS normalisation with a learned `(1, cols)` gain.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Var {
        let (vx, vw) = (self.value(x), self.value(weight));
        assert_eq!(vw.shape(), (1, vx.cols()), "rms_norm weight");
        let n = vx.cols() as f64;
        let mut out = vx.clone();
        let mut inv_rms = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let ms = vx.row(r).iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (o, w) in out.row_mut(r).iter_mut().zip(vw.data()) {
                *o *= inv * w;
            }
        }
        let rg = self.rg(x) || self.rg(weight);
        self.push(out, Op::RmsNorm { x, weight, inv_rms }, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.rows(), "slice_rows out of range");
        let out = vx.slice_rows(start, len);
        let rg = self.rg(x);
        self.push(out, Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.cols(), "slice_cols out of range");
        let out = Tensor::from_fn(vx.rows(), len, |r, c| vx.get(r, start + c));
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(rows, cols, data).expect("shape");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).reverse_rows();
        let rg = self.rg(a);
        self.push(out, Op::ReverseRows(a), rg)
    }

    /// Causal depthwise convolution along rows. `weight` is `(kernel, channels)`,
    /// the last kernel tap multiplies the current row.
    pub fn causal_conv(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(weight), self.value(bias));
        let (t_len, ch) = vx.shape();
        let k = vw.rows();
        assert_eq!(vw.cols(), ch, "conv weight channels");
        assert_eq!(vb.shape(), (1, ch), "conv bias");
        let mut out = Tensor::zeros(t_len, ch);
        for t in 0..t_len {
            let o = out.row_mut(t);
            o.copy_from_slice(vb.data());
            for j in 0..k {
                let src = t as isize - (k - 1 - j) as isize;
                if src < 0 {
                    continue;
                }
                let xr = vx.row(src as usize);
                let wr = vw.row(j);
                for c in 0..ch {
                    o[c] += wr[c] * xr[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        self.push(out, Op::CausalConv { x, weight, bias }, rg)
    }

    /// Selective scan with `A = -exp(a_log)`. Shapes: `u`, `delta` are
    /// `(len, channels)`, `a_log` is `(channels, state)`, `b`, `c` are
    /// `(len, state)` and `d_skip` is `(1, channels)`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        rule: Discretization,
    ) -> Result<Var> {
        let (len, channels) = self.shape(u);
        let state = self.shape(a_log).1;
        if self.shape(delta) != (len, channels)
            || self.shape(a_log).0 != channels
            || self.shape(b) != (len, state)
            || self.shape(c) != (len, state)
            || self.shape(d_skip) != (1, channels)
        {
            return Err(Error::Dimension("selective scan operand shapes".into()));
        }
        let a: Vec<f64> = self.value(a_log).data().iter().map(|v| -v.exp()).collect();
        let out = {
            let inputs = ScanInputs {
                u: self.value(u).data(),
                delta: self.value(delta).data(),
                a: &a,
                b: self.value(b).data(),
                c: self.value(c).data(),
                d_skip: Some(self.value(d_skip).data()),
                len,
                channels,
                state,
            };
            ssm::scan(&inputs, rule, true)?
        };
        let y = Tensor::from_vec(len, channels, out.y)?;
        let rg = [u, delta, a_log, b, c, d_skip].iter().any(|&v| self.rg(v));
        let node = ScanNode {
            u,
            delta,
            a_log,
            b,
            c,
            d_skip,
            rule,
            a,
            states: out.states,
        };
        Ok(self.push(y, Op::Scan(Box::new(node)), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean absolute error against a fixed target.
    pub fn l1_loss(&mut self, pred: Var, target: Tensor) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "l1_loss");
        let n = vp.len().max(1) as f64;
        let s: f64 = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t).abs())
            .sum();
        let rg = self.rg(pred);
        self.push(Tensor::scalar(s / n), Op::L1Loss { pred, target }, rg)
    }

    /// Cross-entropy of a `(1, K)` logit row against `class`, with the
    /// log-probability clamped from below at `ln(floor)`.
    pub fn cross_entropy(&mut self, logits: Var, class: usize, floor: f64) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), 1, "cross_entropy expects one row");
        assert!(class < vl.cols(), "class index out of range");
        let m = vl.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + vl.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = vl.data().iter().map(|v| (v - lse).exp()).collect();
        let logp = vl.get(0, class) - lse;
        let floor_log = floor.ln();
        let clamped = logp < floor_log;
        let loss = -logp.max(floor_log);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                class,
                probs,
                clamped,
            },
            rg,
        )
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `target` in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Var {
        let z = self.value(logit).item();
        let loss = softplus(z) - target * z;
        let rg = self.rg(logit);
        self.push(Tensor::scalar(loss), Op::BceWithLogits { logit, target }, rg)
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.rows(), rv.cols(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.shape(v);
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, |ga| gemm(g, false, vb, true, ga, 1.0));
                self.accum(grads, *b, |gb| gemm(va, true, g, false, gb, 1.0));
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, |ga| ga.add_assign(g));
                self.accum(grads, *b, |gb| gb.add_assign(g));
            }
            Op::AddRow(x, b) => {
                self.accum(grads, *x, |gx| gx.add_assign(g));
                self.accum(grads, *b, |gb| {
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, |ga| {
                    for ((o, gv), bv) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += gv * bv;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for ((o, gv), av) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, s) => self.accum(grads, *a, |ga| ga.add_scaled(g, *s)),
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accum(grads, *a, |ga| {
                    for ((o, gv), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                self.accum(grads, *a, |ga| {
                    for ((o, gv), xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        let s = sigmoid(*xv);
                        *o += gv * (s + xv * s * (1.0 - s));
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.accum(grads, *a, |ga| {
                    for ((o, gv), xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *o += gv * sigmoid(*xv);
                    }
                });
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let (vx, vw) = (self.value(*x), self.value(*weight));
                let n = vx.cols() as f64;
                self.accum(grads, *weight, |gw| {
                    for r in 0..vx.rows() {
                        let inv = inv_rms[r];
                        for ((o, gv), xv) in gw.data_mut().iter_mut().zip(g.row(r)).zip(vx.row(r)) {
                            *o += gv * xv * inv;
                        }
                    }
                });
                self.accum(grads, *x, |gx| {
                    for r in 0..vx.rows() {
                        let inv = inv_rms[r];
                        let xr = vx.row(r);
                        let gr = g.row(r);
                        let dot: f64 = gr
                            .iter()
                            .zip(vw.data())
                            .zip(xr)
                            .map(|((gv, wv), xv)| gv * wv * xv)
                            .sum();
                        let k = inv * inv * inv * dot / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o += inv * vw.data()[c] * gr[c] - xr[c] * k;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                self.accum(grads, *a, |ga| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::Transpose(a) => self.accum(grads, *a, |ga| ga.add_assign(&g.transpose())),
            Op::SliceRows { x, start } => {
                self.accum(grads, *x, |gx| {
                    let cols = g.cols();
                    let dst = &mut gx.data_mut()[start * cols..(start + g.rows()) * cols];
                    for (o, v) in dst.iter_mut().zip(g.data()) {
                        *o += v;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                self.accum(grads, *x, |gx| {
                    for r in 0..g.rows() {
                        let dst = &mut gx.row_mut(r)[*start..start + g.cols()];
                        for (o, v) in dst.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    self.accum(grads, p, |gp| gp.add_assign(&g.slice_rows(off, rows)));
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    self.accum(grads, p, |gp| {
                        for r in 0..g.rows() {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + cols]) {
                                *o += v;
                            }
                        }
                    });
                    off += cols;
                }
            }
            Op::ReverseRows(a) => self.accum(grads, *a, |ga| ga.add_assign(&g.reverse_rows())),
            Op::CausalConv { x, weight, bias } => {
                let (vx, vw) = (self.value(*x), self.value(*weight));
                let (t_len, ch) = vx.shape();
                let k = vw.rows();
                self.accum(grads, *bias, |gb| {
                    for t in 0..t_len {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(t)) {
                            *o += v;
                        }
                    }
                });
                self.accum(grads, *weight, |gw| {
                    for t in 0..t_len {
                        for j in 0..k {
                            let src = t as isize - (k - 1 - j) as isize;
                            if src < 0 {
                                continue;
                            }
                            let xr = vx.row(src as usize);
                            let gr = g.row(t);
                            let wr = gw.row_mut(j);
                            for c in 0..ch {
                                wr[c] += gr[c] * xr[c];
                            }
                        }
                    }
                });
                self.accum(grads, *x, |gx| {
                    for t in 0..t_len {
                        for j in 0..k {
                            let src = t as isize - (k - 1 - j) as isize;
                            if src < 0 {
                                continue;
                            }
                            let gr = g.row(t);
                            let wr = vw.row(j);
                            let xr = gx.row_mut(src as usize);
                            for c in 0..ch {
                                xr[c] += gr[c] * wr[c];
                            }
                        }
                    }
                });
            }
            Op::Scan(sn) => {
                let (len, channels) = self.shape(sn.u);
                let state = self.shape(sn.a_log).1;
                let inputs = ScanInputs {
                    u: self.value(sn.u).data(),
                    delta: self.value(sn.delta).data(),
                    a: &sn.a,
                    b: self.value(sn.b).data(),
                    c: self.value(sn.c).data(),
                    d_skip: Some(self.value(sn.d_skip).data()),
                    len,
                    channels,
                    state,
                };
                let sg = ssm::scan_backward(&inputs, sn.rule, &sn.states, g.data());
                let add = |gt: &mut Tensor, src: &[f64]| {
                    for (o, v) in gt.data_mut().iter_mut().zip(src) {
                        *o += v;
                    }
                };
                self.accum(grads, sn.u, |t| add(t, &sg.du));
                self.accum(grads, sn.delta, |t| add(t, &sg.ddelta));
                self.accum(grads, sn.b, |t| add(t, &sg.db));
                self.accum(grads, sn.c, |t| add(t, &sg.dc));
                self.accum(grads, sn.d_skip, |t| add(t, &sg.dd));
                // A = -exp(a_log)  =>  dL/da_log = dL/dA * A
                self.accum(grads, sn.a_log, |t| {
                    for ((o, da), a) in t.data_mut().iter_mut().zip(&sg.da).zip(&sn.a) {
                        *o += da * a;
                    }
                });
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accum(grads, *a, |ga| {
                    for o in ga.data_mut() {
                        *o += s;
                    }
                });
            }
            Op::L1Loss { pred, target } => {
                let vp = self.value(*pred);
                let s = g.item() / vp.len().max(1) as f64;
                self.accum(grads, *pred, |gp| {
                    for ((o, p), t) in gp.data_mut().iter_mut().zip(vp.data()).zip(target.data()) {
                        let d = p - t;
                        if d > 0.0 {
                            *o += s;
                        } else if d < 0.0 {
                            *o -= s;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                class,
                probs,
                clamped,
            } => {
                if *clamped {
                    return;
                }
                let s = g.item();
                self.accum(grads, *logits, |gl| {
                    for (k, (o, p)) in gl.data_mut().iter_mut().zip(probs).enumerate() {
                        let onehot = if k == *class { 1.0 } else { 0.0 };
                        *o += s * (p - onehot);
                    }
                });
            }
            Op::BceWithLogits { logit, target } => {
                let z = self.value(*logit).item();
                let s = g.item();
                self.accum(grads, *logit, |gl| gl.data_mut()[0] += s * (sigmoid(z) - target));
            }
        }
    }
}
