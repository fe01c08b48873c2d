//! Reverse-mode automatic differentiation over a recorded computation graph.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep simply walks it in reverse.
//! Every primitive evaluates eagerly; the first primitive that produces a
//! non-finite value poisons the graph and [`Graph::backward`] /
//! [`Graph::check`] report it.

use std::collections::HashMap;

use super::kernels::{gemm, ConvGeometry};
use super::tensor::Tensor;
use super::topk::topk_indices;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather { input: Var, index: Vec<usize> },
    TopKRows { input: Var, mask: Vec<bool> },
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    SoftmaxXent { logits: Var, probs: Vec<f64>, targets: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeometry, cols: Vec<f64> },
    GlobalAvgPool(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to every leaf created with `requires_grad`.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_leaf.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_leaf.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    poisoned: Option<&'static str>,
}

fn unary_shape_ok(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Batched matmul layout: `(batch, m, k)` for the lhs and `(batch, k, n)` for the rhs.
fn mm_dims(t: &Tensor) -> Option<(usize, usize, usize)> {
    match *t.shape() {
        [r, c] => Some((1, r, c)),
        [b, r, c] => Some((b, r, c)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Fails if any primitive so far produced NaN or ±Inf.
    pub fn check(&self) -> Result<()> {
        match self.poisoned {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Var {
        if self.poisoned.is_none() && !value.all_finite() {
            self.poisoned = Some(name);
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf node; gradients are reported for it when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Matrix product. Supports `[m,k]·[k,n]`, batched `[b,m,k]·[b,k,n]`,
    /// and a 2-D operand broadcast against a batched one.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ba, m, k) = mm_dims(ta)
            .ok_or_else(|| Error::Shape(format!("matmul lhs rank {}", ta.rank())))?;
        let (bb, k2, n) = mm_dims(tb)
            .ok_or_else(|| Error::Shape(format!("matmul rhs rank {}", tb.rank())))?;
        let batched = ta.rank() == 3 || tb.rank() == 3;
        if k != k2 || (ta.rank() == 3 && tb.rank() == 3 && ba != bb) {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let batch = ba.max(bb);
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let sa = if ba == 1 { 0 } else { t };
            let sb = if bb == 1 { 0 } else { t };
            gemm(
                m,
                k,
                n,
                1.0,
                &ta.data()[sa * m * k..(sa + 1) * m * k],
                false,
                &tb.data()[sb * k * n..(sb + 1) * k * n],
                false,
                0.0,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let shape = if batched { vec![batch, m, n] } else { vec![m, n] };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), ng, "matmul"))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("transpose of rank {}", t.rank())));
        }
        let out = t.transpose();
        let ng = self.needs(a);
        Ok(self.push(out, Op::Transpose(a), ng, "transpose"))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        name: &'static str,
    ) -> Result<Var> {
        unary_shape_ok(self.value(a), self.value(b), name)?;
        let out = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng, name))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Adds a vector `b` of length `n` to every row of `x` (last dim `n`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.cols();
        if tb.numel() != n {
            return Err(Error::Shape(format!(
                "add_bias: {:?} + {:?}",
                tx.shape(),
                tb.shape()
            )));
        }
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % n];
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias(x, b), ng, "add_bias"))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Var {
        let out = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(out, op, ng, name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v + c, Op::AddScalar(a), "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a), "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a), "log")
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a), "sin")
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a), "cos")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a), "abs")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a), "square")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng, "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng, "reshape"))
    }

    /// `out[i] = input[index[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::Shape(format!("gather index {bad} out of {}", t.numel())));
        }
        let data: Vec<f64> = index.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Gather { input: a, index }, ng, "gather"))
    }

    /// Columns `cols` of every row (last dim) of `a`.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, n) = (t.rows(), t.cols());
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::Shape(format!("column {bad} out of {n}")));
        }
        let index: Vec<usize> =
            (0..rows).flat_map(|r| cols.iter().map(move |&c| r * n + c)).collect();
        self.gather(a, index, &[rows, cols.len()])
    }

    /// Keeps the `k` largest entries of each row (last dim), zeroing the rest.
    /// Ties go to the lowest index. Gradient flows through kept entries only.
    pub fn topk_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!("topk k = {k} with dim {n}")));
        }
        let mut mask = vec![false; t.numel()];
        for r in 0..t.rows() {
            for j in topk_indices(t.row(r), k) {
                mask[r * n + j] = true;
            }
        }
        let data: Vec<f64> =
            t.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let ng = self.needs(a);
        Ok(self.push(out, Op::TopKRows { input: a, mask }, ng, "topk"))
    }

    /// Divides each row (last dim) by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for row in out.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::L2NormalizeRows { input: a, norms }, ng, "l2_normalize")
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross-entropy logits {:?} vs {} labels",
                t.shape(),
                labels.len()
            )));
        }
        let c = t.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} with {c} classes")));
        }
        let mut targets = vec![0.0; labels.len() * c];
        for (r, &l) in labels.iter().enumerate() {
            targets[r * c + l] = 1.0;
        }
        self.xent(logits, targets)
    }

    /// Mean softmax cross-entropy against target distributions `[batch, classes]` (rows sum to 1).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("cross-entropy logits must be rank 2, got {:?}", t.shape())));
        }
        unary_shape_ok(t, targets, "soft_cross_entropy")?;
        if targets.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("negative target probability".into()));
        }
        for r in 0..targets.rows() {
            let s: f64 = targets.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("target row {r} sums to {s}")));
            }
        }
        self.xent(logits, targets.data().to_vec())
    }

    fn xent(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let t = self.value(logits);
        let (rows, c) = (t.rows(), t.cols());
        let probs = softmax_rows(t);
        let loss = (0..rows)
            .map(|r| {
                let row = t.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter().zip(&targets[r * c..(r + 1) * c]).map(|(z, y)| y * (lse - z)).sum::<f64>()
            })
            .sum::<f64>()
            / rows as f64;
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, probs, targets }, ng, "softmax_cross_entropy"))
    }

    /// Mean elementwise binary cross-entropy of logits against `{0,1}` (or soft) targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        unary_shape_ok(t, targets, "bce_with_logits")?;
        let loss = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / t.numel() as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets: targets.data().to_vec() },
            ng,
            "bce_with_logits",
        ))
    }

    /// Square-kernel convolution: `input [b,c,h,w]`, `weight [o,c,k,k]`, `bias [o]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        let (&[b, c, h, w], &[o, wc, kh, kw]) = (tx.shape(), tw.shape()) else {
            return Err(Error::Shape(format!(
                "conv2d expects rank-4 input and weight, got {:?} / {:?}",
                tx.shape(),
                tw.shape()
            )));
        };
        if wc != c || kh != kw || tb.numel() != o || stride == 0 || h + 2 * pad < kh {
            return Err(Error::Shape(format!(
                "conv2d input {:?} weight {:?} bias {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let geom = ConvGeometry { channels: c, height: h, width: w, kernel: kh, stride, pad };
        let (pl, p) = (geom.patch_len(), geom.positions());
        let (xs, ws, bs) = (tx.data(), tw.data(), tb.data());
        let per_sample: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(b, |s| {
            let mut cols = vec![0.0; pl * p];
            geom.im2col(&xs[s * c * h * w..(s + 1) * c * h * w], &mut cols);
            let mut out = vec![0.0; o * p];
            for (oc, row) in out.chunks_mut(p).enumerate() {
                row.fill(bs[oc]);
            }
            gemm(o, pl, p, 1.0, ws, false, &cols, false, 1.0, &mut out);
            (cols, out)
        });
        let mut cols = Vec::with_capacity(b * pl * p);
        let mut out = Vec::with_capacity(b * o * p);
        for (cs, os) in per_sample {
            cols.extend(cs);
            out.extend(os);
        }
        let shape = vec![b, o, geom.out_height(), geom.out_width()];
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d { input, weight, bias, geom, cols },
            ng,
            "conv2d",
        ))
    }

    /// Mean over the spatial dims of `[b,c,h,w]`, giving `[b,c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[b, c, h, w] = t.shape() else {
            return Err(Error::Shape(format!("global_avg_pool of {:?}", t.shape())));
        };
        let hw = h * w;
        let out: Vec<f64> =
            t.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(vec![b, c], out), Op::GlobalAvgPool(a), ng, "avg_pool"))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check()?;
        if !self.value(root).is_scalar() {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }

        let mut by_leaf = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads[idx].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                if !g.all_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                by_leaf.insert(Var(idx), g);
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.needs(v) {
            return;
        }
        debug_assert!(v.0 < grads.len(), "graph is not topologically ordered");
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            // f(input, output, upstream)
            let x = self.value(a);
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ba, m, k) = mm_dims(ta).expect("validated");
                let (bb, _, n) = mm_dims(tb).expect("validated");
                let batch = ba.max(bb);
                if self.needs(*a) {
                    let mut da = vec![0.0; ta.numel()];
                    for t in 0..batch {
                        let sa = if ba == 1 { 0 } else { t };
                        let sb = if bb == 1 { 0 } else { t };
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g.data()[t * m * n..(t + 1) * m * n],
                            false,
                            &tb.data()[sb * k * n..(sb + 1) * k * n],
                            true,
                            1.0,
                            &mut da[sa * m * k..(sa + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; tb.numel()];
                    for t in 0..batch {
                        let sa = if ba == 1 { 0 } else { t };
                        let sb = if bb == 1 { 0 } else { t };
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &ta.data()[sa * m * k..(sa + 1) * m * k],
                            true,
                            &g.data()[t * m * n..(t + 1) * m * n],
                            false,
                            1.0,
                            &mut db[sb * k * n..(sb + 1) * k * n],
                        );
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), db));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g.zip_map(self.value(*b), |gi, bi| gi * bi)?;
                    self.accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = g.zip_map(self.value(*a), |gi, ai| gi * ai)?;
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_parts(shape, db));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = elementwise(*a, &|x, _, gi| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = elementwise(*a, &|_, y, gi| gi * y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = elementwise(*a, &|_, y, gi| gi * (1.0 - y * y));
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = elementwise(*a, &|_, y, gi| gi * y);
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = elementwise(*a, &|x, _, gi| gi / x);
                self.accumulate(grads, *a, d);
            }
            Op::Sin(a) => {
                let d = elementwise(*a, &|x, _, gi| gi * x.cos());
                self.accumulate(grads, *a, d);
            }
            Op::Cos(a) => {
                let d = elementwise(*a, &|x, _, gi| -gi * x.sin());
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = elementwise(*a, &|x, _, gi| {
                    if x > 0.0 {
                        gi
                    } else if x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = elementwise(*a, &|x, _, gi| 2.0 * x * gi);
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let gi = g.item();
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gi));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let gi = g.item() / t.numel() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape(), gi));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Gather { input, index } => {
                let t = self.value(*input);
                let mut d = vec![0.0; t.numel()];
                for (&i, &gi) in index.iter().zip(g.data()) {
                    d[i] += gi;
                }
                self.accumulate(grads, *input, Tensor::from_parts(t.shape().to_vec(), d));
            }
            Op::TopKRows { input, mask } => {
                let data =
                    g.data().iter().zip(mask).map(|(&gi, &m)| if m { gi } else { 0.0 }).collect();
                self.accumulate(grads, *input, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::L2NormalizeRows { input, norms } => {
                let n = out.cols();
                let mut d = vec![0.0; out.numel()];
                for (r, &norm) in norms.iter().enumerate() {
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gy = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = (gy[j] - y[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::SoftmaxXent { logits, probs, targets } => {
                let t = self.value(*logits);
                let scale = g.item() / t.rows() as f64;
                let d: Vec<f64> = probs.iter().zip(targets).map(|(p, y)| (p - y) * scale).collect();
                self.accumulate(grads, *logits, Tensor::from_parts(t.shape().to_vec(), d));
            }
            Op::BceWithLogits { logits, targets } => {
                let t = self.value(*logits);
                let scale = g.item() / t.numel() as f64;
                let d = t
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                self.accumulate(grads, *logits, Tensor::from_parts(t.shape().to_vec(), d));
            }
            Op::Conv2d { input, weight, bias, geom, cols } => {
                self.conv2d_backward(g, *input, *weight, *bias, geom, cols, grads);
            }
            Op::GlobalAvgPool(a) => {
                let t = self.value(*a);
                let hw = t.shape()[2] * t.shape()[3];
                let mut d = vec![0.0; t.numel()];
                for (ch, &gi) in d.chunks_mut(hw).zip(g.data()) {
                    ch.fill(gi / hw as f64);
                }
                self.accumulate(grads, *a, Tensor::from_parts(t.shape().to_vec(), d));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor,
        input: Var,
        weight: Var,
        bias: Var,
        geom: &ConvGeometry,
        cols: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (tx, tw) = (self.value(input), self.value(weight));
        let b = tx.shape()[0];
        let o = tw.shape()[0];
        let (pl, p) = (geom.patch_len(), geom.positions());
        let sample_len = geom.channels * geom.height * geom.width;
        let (need_x, need_w) = (self.needs(input), self.needs(weight));
        let gd = g.data();
        let ws = tw.data();

        // Per-sample partials, reduced below in sample order.
        let partials: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(b, |s| {
            let gs = &gd[s * o * p..(s + 1) * o * p];
            let cs = &cols[s * pl * p..(s + 1) * pl * p];
            let mut dw = Vec::new();
            if need_w {
                dw = vec![0.0; o * pl];
                gemm(o, p, pl, 1.0, gs, false, cs, true, 0.0, &mut dw);
            }
            let mut dx = Vec::new();
            if need_x {
                let mut dcols = vec![0.0; pl * p];
                gemm(pl, o, p, 1.0, ws, true, gs, false, 0.0, &mut dcols);
                dx = vec![0.0; sample_len];
                geom.col2im(&dcols, &mut dx);
            }
            (dw, dx)
        });

        if need_w {
            let mut dw = vec![0.0; o * pl];
            for (part, _) in &partials {
                for (d, v) in dw.iter_mut().zip(part) {
                    *d += v;
                }
            }
            self.accumulate(grads, weight, Tensor::from_parts(tw.shape().to_vec(), dw));
        }
        if self.needs(bias) {
            let mut db = vec![0.0; o];
            for s in 0..b {
                for (oc, d) in db.iter_mut().enumerate() {
                    *d += gd[(s * o + oc) * p..(s * o + oc + 1) * p].iter().sum::<f64>();
                }
            }
            self.accumulate(grads, bias, Tensor::from_parts(vec![o], db));
        }
        if need_x {
            let mut dx = Vec::with_capacity(b * sample_len);
            for (_, part) in partials {
                dx.extend(part);
            }
            self.accumulate(grads, input, Tensor::from_parts(tx.shape().to_vec(), dx));
        }
    }
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut out = Vec::with_capacity(t.numel());
    for r in 0..t.rows() {
        let row = &t.data()[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_root_gives_zero_grads() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let c = g.constant(Tensor::vector(vec![4.0, 5.0]));
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_poisons_graph() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0]), true);
        let y = g.log(x);
        let s = g.sum(y);
        assert!(matches!(g.check(), Err(Error::NonFinite { op: "log" })));
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = sum(x * x + x) → dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.5, -2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let t = g.add(sq, x).unwrap();
        let s = g.sum(t);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -3.0]);
    }
}
