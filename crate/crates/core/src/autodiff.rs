//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward op appends a node to a [`Tape`]; operands always precede
//! the node that consumes them, so [`Tape::backward`] is a single sweep in
//! reverse recording order.
//!
//! ```
//! use booster_core::autodiff::Tape;
//! use booster_core::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64_slice(&[3], &[1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{gemm_into, Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Reshape(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        k: Var,
        pad: (usize, usize),
        cols: Vec<S>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<S>,
        labels: Vec<usize>,
    },
    Margin {
        logits: Var,
        // (true class, runner-up class, inside the clamp)
        picks: Vec<(usize, usize, bool)>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, grad: Tensor<S>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(grad),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Records an input. Only leaves with `requires_grad` (and the nodes
    /// computed from them) receive gradients.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: &'static str, value: Tensor<S>, kind: Op<S>, operands: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                context: format!("output of {op}"),
            });
        }
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        gemm_into(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Adds `bias` (length C) along axis 1 of `x` (shape `(N, C, ...)`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.ndim() < 2 || bv.ndim() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let c = xv.shape()[1];
        let inner: usize = xv.shape()[2..].iter().product();
        let mut data = xv.data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let b = bv.data()[i % c];
            for v in chunk {
                *v = *v + b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self
            .value(x)
            .map(|v| if v > S::zero() { v } else { S::zero() });
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = S::from_f64(factor);
        let value = self.value(x).map(|v| v * f);
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    /// Collapses every axis after the first: `(N, ...) -> (N, prod)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() < 1 {
            return Err(shape_err("flatten", xv.shape(), &[]));
        }
        let n = xv.shape()[0];
        let value = xv.reshape(&[n, xv.len() / n])?;
        self.push("flatten", value, Op::Reshape(x), &[x])
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(S::from_f64(self.value(x).sum_f64()));
        self.push("sum", value, Op::Sum(x), &[x])
    }

    /// Stride-1 2-D cross-correlation of `x (N,C,H,W)` with `k (O,C,KH,KW)`.
    /// `Same` padding requires odd kernel extents.
    pub fn conv2d(&mut self, x: Var, k: Var, padding: Padding) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        if xv.ndim() != 4 || kv.ndim() != 4 || xv.shape()[1] != kv.shape()[1] {
            return Err(shape_err("conv2d", xv.shape(), kv.shape()));
        }
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let [o, _, kh, kw] = [kv.shape()[0], kv.shape()[1], kv.shape()[2], kv.shape()[3]];
        let pad = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(shape_err("conv2d(same) needs odd kernel", xv.shape(), kv.shape()));
                }
                ((kh - 1) / 2, (kw - 1) / 2)
            }
        };
        if h + 2 * pad.0 < kh || w + 2 * pad.1 < kw {
            return Err(shape_err("conv2d", xv.shape(), kv.shape()));
        }
        let (oh, ow) = (h + 2 * pad.0 - kh + 1, w + 2 * pad.1 - kw + 1);
        let geom = ConvGeom { n, c, h, w, kh, kw, oh, ow, pad };
        let cols = im2col(xv.data(), &geom);
        let ckk = c * kh * kw;
        let ncols = n * oh * ow;
        let mut tmp = vec![S::zero(); o * ncols];
        gemm_into(o, ckk, ncols, kv.data(), false, &cols, false, &mut tmp, false);
        // (O, N, OH*OW) -> (N, O, OH*OW)
        let ohw = oh * ow;
        let mut out = vec![S::zero(); n * o * ohw];
        for oc in 0..o {
            for b in 0..n {
                let src = &tmp[oc * ncols + b * ohw..oc * ncols + (b + 1) * ohw];
                out[(b * o + oc) * ohw..(b * o + oc + 1) * ohw].copy_from_slice(src);
            }
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        self.push("conv2d", value, Op::Conv2d { x, k, pad, cols }, &[x, k])
    }

    /// 2×2 max pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 4 || xv.shape()[2] < 2 || xv.shape()[3] < 2 {
            return Err(shape_err("maxpool2x2", xv.shape(), &[2, 2]));
        }
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let (oh, ow) = (h / 2, w / 2);
        let src = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("maxpool2x2", value, Op::MaxPool { x, argmax }, &[x])
    }

    /// Mean softmax cross-entropy over the batch, using the log-sum-exp form.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        check_labels("softmax_cross_entropy", lv, labels)?;
        let k = lv.shape()[1];
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = 0.0f64;
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let lse = max + denom.ln();
            total += lse - row[y].as_f64();
            probs.extend(row.iter().map(|v| S::from_f64((v.as_f64() - lse).exp())));
        }
        let value = Tensor::scalar(S::from_f64(total / labels.len() as f64));
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Mean of `max(z_y - max_{j != y} z_j, -kappa)` over the batch.
    pub fn margin_loss(&mut self, logits: Var, labels: &[usize], kappa: f64) -> Result<Var> {
        let lv = self.value(logits);
        check_labels("margin_loss", lv, labels)?;
        let k = lv.shape()[1];
        if k < 2 {
            return Err(Error::contract("margin loss needs at least two classes"));
        }
        let mut picks = Vec::with_capacity(labels.len());
        let mut total = 0.0f64;
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            let runner = runner_up(row, y);
            let margin = row[y].as_f64() - row[runner].as_f64();
            let active = margin > -kappa;
            total += if active { margin } else { -kappa };
            picks.push((y, runner, active));
        }
        let value = Tensor::scalar(S::from_f64(total / labels.len() as f64));
        self.push("margin_loss", value, Op::Margin { logits, picks }, &[logits])
    }

    /// Propagates from the scalar `loss` back to every leaf that requires a
    /// gradient. The seed gradient is 1. Gradients of intermediate nodes are
    /// released once consumed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.backprop_node(node, g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<S>, mut g: Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm_into(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                    accumulate(&mut grads[a.0], Tensor::new(vec![m, k], da).expect("shape"));
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm_into(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                    accumulate(&mut grads[b.0], Tensor::new(vec![k, n], db).expect("shape"));
                }
            }
            Op::Add(a, b) => match (self.wants(*a), self.wants(*b)) {
                (true, true) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                (true, false) => accumulate(&mut grads[a.0], g),
                (false, true) => accumulate(&mut grads[b.0], g),
                (false, false) => {}
            },
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(g, y)| *g * *y).collect();
                    accumulate(&mut grads[a.0], Tensor::new(av.shape().to_vec(), d).expect("shape"));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(g, x)| *g * *x).collect();
                    accumulate(&mut grads[b.0], Tensor::new(bv.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let inner: usize = g.shape()[2..].iter().product();
                    let mut acc = vec![0.0f64; c];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        acc[i % c] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let d = acc.into_iter().map(S::from_f64).collect();
                    accumulate(&mut grads[bias.0], Tensor::new(vec![c], d).expect("shape"));
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                for (gv, v) in g.data_mut().iter_mut().zip(xv.data()) {
                    if *v <= S::zero() {
                        *gv = S::zero();
                    }
                }
                accumulate(&mut grads[x.0], g);
            }
            Op::Scale(x, factor) => {
                let f = S::from_f64(*factor);
                for v in g.data_mut() {
                    *v = *v * f;
                }
                accumulate(&mut grads[x.0], g);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(&mut grads[x.0], Tensor::new(shape, g.into_data()).expect("shape"));
            }
            Op::Sum(x) => {
                let seed = g.data()[0];
                accumulate(&mut grads[x.0], Tensor::full(self.value(*x).shape(), seed));
            }
            Op::Conv2d { x, k, pad, cols } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
                let [o, _, kh, kw] = [kv.shape()[0], kv.shape()[1], kv.shape()[2], kv.shape()[3]];
                let (oh, ow) = (g.shape()[2], g.shape()[3]);
                let geom = ConvGeom { n, c, h, w, kh, kw, oh, ow, pad: *pad };
                let ohw = oh * ow;
                let ncols = n * ohw;
                let ckk = c * kh * kw;
                // (N, O, OHW) -> (O, N*OHW)
                let mut gt = vec![S::zero(); o * ncols];
                for b in 0..n {
                    for oc in 0..o {
                        let src = &g.data()[(b * o + oc) * ohw..(b * o + oc + 1) * ohw];
                        gt[oc * ncols + b * ohw..oc * ncols + (b + 1) * ohw].copy_from_slice(src);
                    }
                }
                if self.wants(*k) {
                    let mut dk = vec![S::zero(); o * ckk];
                    gemm_into(o, ncols, ckk, &gt, false, cols, true, &mut dk, false);
                    accumulate(&mut grads[k.0], Tensor::new(kv.shape().to_vec(), dk).expect("shape"));
                }
                if self.wants(*x) {
                    let mut dcols = vec![S::zero(); ckk * ncols];
                    gemm_into(ckk, o, ncols, kv.data(), true, &gt, false, &mut dcols, false);
                    let dx = col2im(&dcols, &geom);
                    accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
                }
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![S::zero(); xv.len()];
                for (gv, &idx) in g.data().iter().zip(argmax) {
                    dx[idx] = dx[idx] + *gv;
                }
                accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let scale = g.data()[0].as_f64() / labels.len() as f64;
                let mut d: Vec<S> = probs
                    .iter()
                    .map(|p| S::from_f64(p.as_f64() * scale))
                    .collect();
                // p_y - 1 = -sum_{j != y} p_j, which stays nonzero when p_y rounds to 1
                for (i, &y) in labels.iter().enumerate() {
                    let row = &probs[i * k..(i + 1) * k];
                    let rest: f64 = row
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != y)
                        .map(|(_, p)| p.as_f64())
                        .sum();
                    d[i * k + y] = S::from_f64(-rest * scale);
                }
                accumulate(&mut grads[logits.0], Tensor::new(lv.shape().to_vec(), d).expect("shape"));
            }
            Op::Margin { logits, picks } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let scale = S::from_f64(g.data()[0].as_f64() / picks.len() as f64);
                let mut d = vec![S::zero(); lv.len()];
                for (i, &(y, runner, active)) in picks.iter().enumerate() {
                    if active {
                        d[i * k + y] = scale;
                        d[i * k + runner] = -scale;
                    }
                }
                accumulate(&mut grads[logits.0], Tensor::new(lv.shape().to_vec(), d).expect("shape"));
            }
        }
    }
}

fn check_labels<S: Scalar>(op: &'static str, logits: &Tensor<S>, labels: &[usize]) -> Result<()> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(shape_err(op, logits.shape(), &[labels.len()]));
    }
    let k = logits.shape()[1];
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::contract(format!("{op}: label {bad} outside [0, {k})")));
    }
    Ok(())
}

/// Index of the largest entry other than `y`; ties resolve to the lowest index.
pub(crate) fn runner_up<S: Scalar>(row: &[S], y: usize) -> usize {
    let mut best = usize::MAX;
    for (j, v) in row.iter().enumerate() {
        if j != y && (best == usize::MAX || *v > row[best]) {
            best = j;
        }
    }
    best
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad: (usize, usize),
}

/// Output columns `oj` whose input column `oj + kj - pad` lies inside `[0, w)`.
fn valid_cols(kj: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj);
    let hi = (w + pad).saturating_sub(kj).min(ow);
    (lo, hi.max(lo))
}

/// Unfolds `x` into a `(C*KH*KW, N*OH*OW)` matrix.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let ohw = g.oh * g.ow;
    let ncols = g.n * ohw;
    let mut cols = vec![S::zero(); g.c * g.kh * g.kw * ncols];
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(kj, g.pad.1, g.w, g.ow);
                if lo >= hi {
                    continue;
                }
                let shift = lo + kj - g.pad.1;
                for b in 0..g.n {
                    let plane = &x[(b * g.c + ch) * g.h * g.w..(b * g.c + ch + 1) * g.h * g.w];
                    for oi in 0..g.oh {
                        let ii = oi + ki;
                        if ii < g.pad.0 || ii - g.pad.0 >= g.h {
                            continue;
                        }
                        let src = (ii - g.pad.0) * g.w + shift;
                        let dst = b * ohw + oi * g.ow;
                        dst_row[dst + lo..dst + hi].copy_from_slice(&plane[src..src + hi - lo]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom) -> Vec<S> {
    let ohw = g.oh * g.ow;
    let ncols = g.n * ohw;
    let mut dx = vec![S::zero(); g.n * g.c * g.h * g.w];
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(kj, g.pad.1, g.w, g.ow);
                if lo >= hi {
                    continue;
                }
                let shift = lo + kj - g.pad.1;
                for b in 0..g.n {
                    let base = (b * g.c + ch) * g.h * g.w;
                    for oi in 0..g.oh {
                        let ii = oi + ki;
                        if ii < g.pad.0 || ii - g.pad.0 >= g.h {
                            continue;
                        }
                        let dst = base + (ii - g.pad.0) * g.w + shift;
                        let src = b * ohw + oi * g.ow;
                        for (d, s) in dx[dst..dst + hi - lo].iter_mut().zip(&src_row[src + lo..src + hi]) {
                            *d = *d + *s;
                        }
                    }
                }
            }
        }
    }
    dx
}
