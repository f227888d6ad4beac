//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because inputs always precede their consumers.
//! All reductions run sequentially in index order, so gradients are
//! bit-reproducible for a given input.
//!
//! The op set is exactly what the four forecasting architectures need; there
//! is no general broadcasting.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    AddBroadcast(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    SwapAxes12(Var),
    SoftmaxLast(Var),
    /// Softmax attention; `probs` holds the `(B, L, L)` weights when a
    /// gradient is needed, otherwise it is empty.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanAxis1(Var),
    SliceCols { a: Var, start: usize },
    Conv1d { x: Var, w: Var, b: Var, pad: usize },
    AdaptiveAvgPool1d(Var),
    Mse { pred: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder and gradient evaluator.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input (no gradient is propagated into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
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

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Fail with the given layer name if `v` holds a non-finite value.
    pub fn check_finite(&self, v: Var, layer: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric {
                layer: layer.to_string(),
            })
        }
    }

    /// `(m,k) · (k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched `(B,m,k) · (B,k,n)`, or `(B,m,k) · (B,n,k)ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape(format!(
                "batch_matmul inner dims {sa:?} x {sb:?} (trans_b={trans_b})"
            )));
        }
        let mut out = vec![0.0; bs * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_acc(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![bs, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias rows, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("add_broadcast {sa:?} + {sb:?}")));
        }
        let bv = self.value(b).data();
        let block = bv.len();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(block) {
            for (o, x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBroadcast(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// `(d0,d1,d2,d3) → (d0,d2,d1,d3)`.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("swap_axes12 on {s:?}")));
        }
        let out = swap12(self.value(a).data(), s[0], s[1], s[2], s[3]);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![s[0], s[2], s[1], s[3]], out)?,
            Op::SwapAxes12(a),
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let d = *s.last().expect("softmax on scalar");
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let shape = s.to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out).unwrap(), Op::SoftmaxLast(a), rg)
    }

    /// `softmax(scale·Q·Kᵀ)·V` per batch entry for `(B, L, d)` inputs. Only
    /// one `(L, L)` score block is live at a time.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::shape(format!(
                "attention {:?} / {:?} / {:?}",
                s,
                self.shape(k),
                self.shape(v)
            )));
        }
        let (bs, l, d) = (s[0], s[1], s[2]);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; bs * l * d];
        let mut probs = if rg { vec![0.0; bs * l * l] } else { Vec::new() };
        let mut block = vec![0.0; l * l];
        for i in 0..bs {
            let r = i * l * d..(i + 1) * l * d;
            let p: &mut [f64] = if rg { &mut probs[i * l * l..(i + 1) * l * l] } else { &mut block };
            p.iter_mut().for_each(|x| *x = 0.0);
            gemm_acc(l, d, l, &qv[r.clone()], false, &kv[r.clone()], true, p);
            for row in p.chunks_mut(l) {
                let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x * scale - mx).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            gemm_acc(l, l, d, p, false, &vv[r.clone()], false, &mut out[r]);
        }
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm on scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm gamma/beta {:?}/{:?} for width {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean over axis 1 of a 3-D tensor: `(B,T,D) → (B,D)`.
    pub fn mean_axis1(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("mean_axis1 on {s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let av = self.value(a).data();
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..t {
                let src = &av[(i * t + j) * d..(i * t + j + 1) * d];
                for (o, x) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *o += x;
                }
            }
        }
        let inv = 1.0 / t as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::MeanAxis1(a), rg))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} of {s:?}",
                start + len
            )));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            out.extend_from_slice(&av[r * s[1] + start..r * s[1] + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![s[0], len], out)?,
            Op::SliceCols { a, start },
            rg,
        ))
    }

    /// Stride-1 1-D convolution with symmetric zero padding.
    ///
    /// `x (B,Cin,T)`, `w (Cout,Cin,K)`, `b (Cout)` → `(B,Cout,T+2·pad−K+1)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::shape(format!("conv1d x{sx:?} w{sw:?} b{sb:?}")));
        }
        let (bs, cin, t) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if t + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv1d: input length {t} with padding {pad} shorter than kernel {k}"
            )));
        }
        let tout = t + 2 * pad - k + 1;
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![0.0; bs * cout * tout];
        let mut cols = vec![0.0; cin * k * tout];
        for i in 0..bs {
            im2col(&xv[i * cin * t..(i + 1) * cin * t], cin, t, k, pad, tout, &mut cols);
            let o = &mut out[i * cout * tout..(i + 1) * cout * tout];
            for (c, row) in o.chunks_mut(tout).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[c]);
            }
            gemm_acc(cout, cin * k, tout, wv, false, &cols, false, o);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![bs, cout, tout], out)?,
            Op::Conv1d { x, w, b, pad },
            rg,
        ))
    }

    /// Adaptive average pooling `(B,C,T) → (B,C,out)`; bin `i` averages
    /// positions `⌊i·T/out⌋ .. ⌈(i+1)·T/out⌉`.
    pub fn adaptive_avg_pool1d(&mut self, a: Var, out_len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || out_len == 0 || s[2] == 0 {
            return Err(Error::shape(format!("adaptive_avg_pool1d {s:?} -> {out_len}")));
        }
        let (rows, t) = (s[0] * s[1], s[2]);
        let av = self.value(a).data();
        let mut out = vec![0.0; rows * out_len];
        for r in 0..rows {
            let src = &av[r * t..(r + 1) * t];
            for i in 0..out_len {
                let (lo, hi) = pool_bin(i, t, out_len);
                out[r * out_len + i] = src[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1], out_len], out)?,
            Op::AdaptiveAvgPool1d(a),
            rg,
        ))
    }

    /// Mean squared error of `pred` (any shape with `n` values) against `target`.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred).data();
        if pv.len() != target.len() || target.is_empty() {
            return Err(Error::shape(format!(
                "mse: {} predictions vs {} targets",
                pv.len(),
                target.len()
            )));
        }
        let mut acc = 0.0;
        for (p, y) in pv.iter().zip(target) {
            acc += (p - y) * (p - y);
        }
        let loss = acc / target.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    /// Entries for nodes that do not require grad (or are unreachable) are `None`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, d) in t.data_mut().iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v).to_vec(), delta).expect("grad shape"));
            }
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_acc(m, n, k, gd, false, self.value(*b).data(), true, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_acc(k, m, n, self.value(*a).data(), true, gd, false, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm_acc(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let (gi, ai) = (&gd[i * m * n..(i + 1) * m * n], &av[i * m * k..(i + 1) * m * k]);
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm_acc(n, m, k, gi, true, ai, false, dst);
                        } else {
                            gemm_acc(k, m, n, ai, true, gi, false, dst);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.rg(*b) {
                    let block = self.value(*b).len();
                    let mut db = vec![0.0; block];
                    for chunk in gd.chunks(block) {
                        for (d, x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let da = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * s).collect());
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let da = gd
                    .iter()
                    .zip(av)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let da = gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let da = gd.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, gd.to_vec());
            }
            Op::SwapAxes12(a) => {
                let s = node.value.shape();
                // node is (d0,d2,d1,d3); swapping again restores the input layout
                let da = swap12(gd, s[0], s[1], s[2], s[3]);
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxLast(a) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut da = vec![0.0; y.len()];
                for ((dst, yr), gr) in da.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            } => {
                let s = self.shape(*q);
                let (bs, l, d) = (s[0], s[1], s[2]);
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; bs * l * d];
                let mut dk = vec![0.0; bs * l * d];
                let mut dv = vec![0.0; bs * l * d];
                let mut ds = vec![0.0; l * l];
                for i in 0..bs {
                    let r = i * l * d..(i + 1) * l * d;
                    let p = &probs[i * l * l..(i + 1) * l * l];
                    let go = &gd[r.clone()];
                    gemm_acc(l, l, d, p, true, go, false, &mut dv[r.clone()]);
                    ds.iter_mut().for_each(|x| *x = 0.0);
                    gemm_acc(l, d, l, go, false, &vv[r.clone()], true, &mut ds);
                    for (dr, pr) in ds.chunks_mut(l).zip(p.chunks(l)) {
                        let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for j in 0..l {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    gemm_acc(l, l, d, &ds, false, &kv[r.clone()], false, &mut dq[r.clone()]);
                    gemm_acc(l, l, d, &ds, true, &qv[r.clone()], false, &mut dk[r]);
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let inv_d = 1.0 / d as f64;
                    for (r, ((dst, gr), hr)) in dx
                        .chunks_mut(d)
                        .zip(gd.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dst[j] = inv_std[r] * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::MeanAxis1(a) => {
                let s = self.shape(*a);
                let (b, t, d) = (s[0], s[1], s[2]);
                let inv = 1.0 / t as f64;
                let mut da = vec![0.0; b * t * d];
                for i in 0..b {
                    for j in 0..t {
                        for c in 0..d {
                            da[(i * t + j) * d + c] = gd[i * d + c] * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SliceCols { a, start } => {
                let s = self.shape(*a);
                let len = node.value.shape()[1];
                let mut da = vec![0.0; s[0] * s[1]];
                for r in 0..s[0] {
                    da[r * s[1] + start..r * s[1] + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Conv1d { x, w, b, pad } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (bs, cin, t) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                let tout = node.value.shape()[2];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut cols = vec![0.0; cin * k * tout];
                let mut dw = vec![0.0; cout * cin * k];
                let mut dbias = vec![0.0; cout];
                let mut dx = if self.rg(*x) {
                    vec![0.0; bs * cin * t]
                } else {
                    Vec::new()
                };
                let mut dcols = vec![0.0; cin * k * tout];
                for i in 0..bs {
                    let gi = &gd[i * cout * tout..(i + 1) * cout * tout];
                    for (c, row) in gi.chunks(tout).enumerate() {
                        dbias[c] += row.iter().sum::<f64>();
                    }
                    if self.rg(*w) {
                        im2col(&xv[i * cin * t..(i + 1) * cin * t], cin, t, k, *pad, tout, &mut cols);
                        gemm_acc(cout, tout, cin * k, gi, false, &cols, true, &mut dw);
                    }
                    if self.rg(*x) {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        gemm_acc(cin * k, cout, tout, wv, true, gi, false, &mut dcols);
                        col2im(&dcols, cin, t, k, *pad, tout, &mut dx[i * cin * t..(i + 1) * cin * t]);
                    }
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, dbias);
                if self.rg(*x) {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::AdaptiveAvgPool1d(a) => {
                let s = self.shape(*a);
                let (rows, t) = (s[0] * s[1], s[2]);
                let out_len = node.value.shape()[2];
                let mut da = vec![0.0; rows * t];
                for r in 0..rows {
                    for i in 0..out_len {
                        let (lo, hi) = pool_bin(i, t, out_len);
                        let share = gd[r * out_len + i] / (hi - lo) as f64;
                        for v in &mut da[r * t + lo..r * t + hi] {
                            *v += share;
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let scale = 2.0 * gd[0] / target.len() as f64;
                let dp = pv.iter().zip(target).map(|(p, y)| scale * (p - y)).collect();
                self.accumulate(grads, *pred, dp);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn swap12(src: &[f64], d0: usize, d1: usize, d2: usize, d3: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let s = ((a * d1 + b) * d2 + c) * d3;
                let d = ((a * d2 + c) * d1 + b) * d3;
                out[d..d + d3].copy_from_slice(&src[s..s + d3]);
            }
        }
    }
    out
}

pub(crate) fn pool_bin(i: usize, t: usize, out_len: usize) -> (usize, usize) {
    let lo = i * t / out_len;
    let hi = ((i + 1) * t).div_ceil(out_len);
    (lo, hi)
}

/// `cols[(c·K + j), τ] = x[c, τ + j − pad]` (zero outside the signal).
fn im2col(x: &[f64], cin: usize, t: usize, k: usize, pad: usize, tout: usize, cols: &mut [f64]) {
    for c in 0..cin {
        for j in 0..k {
            let row = &mut cols[(c * k + j) * tout..(c * k + j + 1) * tout];
            for (tau, v) in row.iter_mut().enumerate() {
                let pos = tau + j;
                *v = if pos >= pad && pos - pad < t {
                    x[c * t + pos - pad]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im(cols: &[f64], cin: usize, t: usize, k: usize, pad: usize, tout: usize, dx: &mut [f64]) {
    for c in 0..cin {
        for j in 0..k {
            let row = &cols[(c * k + j) * tout..(c * k + j + 1) * tout];
            for (tau, v) in row.iter().enumerate() {
                let pos = tau + j;
                if pos >= pad && pos - pad < t {
                    dx[c * t + pos - pad] += v;
                }
            }
        }
    }
}
