//! Reverse-mode differentiation over a linear operation record.
//!
//! Every op appends a node holding its output value; `backward` walks the
//! record in exact reverse order. Nodes built only from constants never
//! require gradients, so teacher passes recorded on a tape cost no backward
//! work.

use super::linalg::{matmul, matmul_a_bt_acc, matmul_at_b_acc};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Offset added inside the square root of pairwise distances.
pub const DIST_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Act(Var, Activation),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Clamp { x: Var, lo: f32, hi: f32 },
    LogSoftmax(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    PadCols(Var),
    PairwiseL2 { a: Var, c: Var },
    Gather { x: Var, idx: Vec<(usize, usize)> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations and their saved values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`; exactly zero when the loss never touched it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_row(src: &[f32], dst: &mut [f32]) {
    let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0f64;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = (s - max).exp();
        *d = e;
        z += e as f64;
    }
    for d in dst.iter_mut() {
        *d = (*d as f64 / z) as f32;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("softmax input")?;
    let (r, _) = x.require_matrix("softmax")?;
    let mut out = x.clone();
    for i in 0..r {
        let src = x.row(i);
        softmax_row(src, out.row_mut(i));
    }
    Ok(out)
}

/// `out[i,j] = sqrt(sum_d (a[i,d] - c[j,d])^2 + DIST_EPS)`.
pub fn pairwise_l2(a: &Tensor, c: &Tensor) -> Result<Tensor> {
    let (n, d) = a.require_matrix("pairwise_l2 lhs")?;
    let (m, d2) = c.require_matrix("pairwise_l2 rhs")?;
    if d != d2 {
        return Err(Error::Dimension(format!(
            "pairwise_l2 feature dims differ: {d} vs {d2}"
        )));
    }
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            out.data_mut()[i * m + j] =
                (super::linalg::sq_dist(ai, c.row(j)) + DIST_EPS).sqrt() as f32;
        }
    }
    Ok(out)
}

/// Dense layer `x W + b` without recording.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bsz, i) = x.require_matrix("affine input")?;
    let (wi, o) = w.require_matrix("affine weight")?;
    if wi != i || b.numel() != o {
        return Err(Error::Dimension(format!(
            "affine: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[bsz, o]);
    matmul(x.data(), w.data(), out.data_mut(), bsz, i, o);
    for r in 0..bsz {
        for (v, &bb) in out.row_mut(r).iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Ok(out)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "parameter leaf")
    }

    /// A leaf that never receives gradient (inputs, detached values).
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant leaf")
    }

    /// Copies the value of `v` into a new gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = affine(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        self.push(out, Op::Affine { x, w, b }, rg, "affine")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op, what: &str, f: impl Fn(f32) -> f32) -> Result<Var> {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg, what)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        match act {
            Activation::Relu => self.unary(x, Op::Act(x, act), "relu", |v| v.max(0.0)),
            Activation::Tanh => self.unary(x, Op::Act(x, act), "tanh", f32::tanh),
            Activation::Identity => self.unary(x, Op::Act(x, act), "identity", |v| v),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), "softplus", softplus)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), "log", f32::ln)
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        self.unary(x, Op::Clamp { x, lo, hi }, "clamp", |v| v.clamp(lo, hi))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, _) = xv.require_matrix("log_softmax")?;
        let mut out = xv.clone();
        for i in 0..r {
            let row = xv.row(i);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln() as f32 + max;
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmax(x), rg, "log_softmax")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax(self.value(x))?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg, "softmax")
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).require_matrix("concat")?;
            if r != rows {
                return Err(Error::Dimension(format!("concat row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[rows, total]);
        for i in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out.row_mut(i)[off..off + w].copy_from_slice(self.value(p).row(i));
                off += w;
            }
        }
        let rg = self.rg(parts);
        self.push(out, Op::Concat(parts.to_vec()), rg, "concat")
    }

    /// Zero-pads the columns of a matrix up to `width`.
    pub fn pad_cols(&mut self, x: Var, width: usize) -> Result<Var> {
        let (r, c) = self.value(x).require_matrix("pad_cols")?;
        if c > width {
            return Err(Error::Dimension(format!("cannot pad {c} columns down to {width}")));
        }
        if c == width {
            return Ok(x);
        }
        let mut out = Tensor::zeros(&[r, width]);
        for i in 0..r {
            out.row_mut(i)[..c].copy_from_slice(self.value(x).row(i));
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::PadCols(x), rg, "pad_cols")
    }

    pub fn pairwise_l2(&mut self, a: Var, c: Var) -> Result<Var> {
        let out = pairwise_l2(self.value(a), self.value(c))?;
        let rg = self.rg(&[a, c]);
        self.push(out, Op::PairwiseL2 { a, c }, rg, "pairwise_l2")
    }

    /// Picks `x[i,j]` for every `(i, j)` into a vector.
    pub fn gather(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.require_matrix("gather")?;
        if idx.is_empty() {
            return Err(Error::Dimension("gather with no indices".into()));
        }
        if let Some(&(i, j)) = idx.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::Dimension(format!("gather index ({i},{j}) outside [{r},{c}]")));
        }
        let out = Tensor::vector(idx.iter().map(|&(i, j)| xv.at(i, j)).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Gather { x, idx: idx.to_vec() }, rg, "gather")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: f64 = v.data().iter().map(|&v| v as f64).sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Mean(x), rg, "mean")
    }

    /// Back-propagates from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate<F: FnOnce(&mut [f32])>(&self, grads: &mut [Option<Tensor>], v: Var, f: F) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bsz, inp) = (xv.rows(), xv.cols());
                let o = wv.cols();
                self.accumulate(grads, *x, |dx| matmul_a_bt_acc(gd, wv.data(), dx, bsz, o, inp));
                self.accumulate(grads, *w, |dw| matmul_at_b_acc(xv.data(), gd, dw, bsz, inp, o));
                self.accumulate(grads, *b, |db| {
                    let mut col = vec![0.0f64; o];
                    for r in 0..bsz {
                        for (c, &v) in col.iter_mut().zip(&gd[r * o..(r + 1) * o]) {
                            *c += v as f64;
                        }
                    }
                    for (d, c) in db.iter_mut().zip(col) {
                        *d += c as f32;
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(bv) {
                        *d += g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g * c));
            }
            Op::Act(x, act) => {
                let xv = self.value(*x).data();
                let yv = out.data();
                self.accumulate(grads, *x, |d| match act {
                    Activation::Relu => {
                        for ((d, g), &v) in d.iter_mut().zip(gd).zip(xv) {
                            if v > 0.0 {
                                *d += g;
                            }
                        }
                    }
                    Activation::Tanh => {
                        for ((d, g), &y) in d.iter_mut().zip(gd).zip(yv) {
                            *d += g * (1.0 - y * y);
                        }
                    }
                    Activation::Identity => d.iter_mut().zip(gd).for_each(|(d, g)| *d += g),
                });
            }
            Op::Sigmoid(x) => {
                let yv = out.data();
                self.accumulate(grads, *x, |d| {
                    for ((d, g), &y) in d.iter_mut().zip(gd).zip(yv) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((d, g), &v) in d.iter_mut().zip(gd).zip(xv) {
                        *d += g * sigmoid(v);
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((d, g), &v) in d.iter_mut().zip(gd).zip(xv) {
                        *d += g / v;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((d, g), &v) in d.iter_mut().zip(gd).zip(xv) {
                        if v > *lo && v < *hi {
                            *d += g;
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                self.accumulate(grads, *x, |d| {
                    for r in 0..out.rows() {
                        let grow = &gd[r * c..(r + 1) * c];
                        let gsum: f64 = grow.iter().map(|&v| v as f64).sum();
                        for ((d, &g), &ls) in d[r * c..(r + 1) * c].iter_mut().zip(grow).zip(out.row(r)) {
                            *d += g - (ls.exp() as f64 * gsum) as f32;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = out.cols();
                self.accumulate(grads, *x, |d| {
                    for r in 0..out.rows() {
                        let grow = &gd[r * c..(r + 1) * c];
                        let srow = out.row(r);
                        let inner: f64 = grow.iter().zip(srow).map(|(&g, &s)| g as f64 * s as f64).sum();
                        for ((d, &g), &s) in d[r * c..(r + 1) * c].iter_mut().zip(grow).zip(srow) {
                            *d += s * (g - inner as f32);
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |d| {
                        for r in 0..out.rows() {
                            for (dd, &g) in d[r * w..(r + 1) * w].iter_mut().zip(&gd[r * total + off..r * total + off + w]) {
                                *dd += g;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::PadCols(x) => {
                let w = self.value(*x).cols();
                let total = out.cols();
                self.accumulate(grads, *x, |d| {
                    for r in 0..out.rows() {
                        for (dd, &g) in d[r * w..(r + 1) * w].iter_mut().zip(&gd[r * total..r * total + w]) {
                            *dd += g;
                        }
                    }
                });
            }
            Op::PairwiseL2 { a, c } => {
                let (av, cv) = (self.value(*a), self.value(*c));
                let (n, m, dim) = (av.rows(), cv.rows(), av.cols());
                // Accumulate both sides before writing so `a == c` works.
                let mut da = vec![0.0f64; n * dim];
                let mut dc = vec![0.0f64; m * dim];
                for i in 0..n {
                    for j in 0..m {
                        let g = gd[i * m + j] as f64;
                        if g == 0.0 {
                            continue;
                        }
                        let dist = out.data()[i * m + j] as f64;
                        let coef = g / dist;
                        for k in 0..dim {
                            let diff = (av.at(i, k) as f64 - cv.at(j, k) as f64) * coef;
                            da[i * dim + k] += diff;
                            dc[j * dim + k] -= diff;
                        }
                    }
                }
                self.accumulate(grads, *a, |d| d.iter_mut().zip(&da).for_each(|(d, v)| *d += *v as f32));
                self.accumulate(grads, *c, |d| d.iter_mut().zip(&dc).for_each(|(d, v)| *d += *v as f32));
            }
            Op::Gather { x, idx } => {
                let cols = self.value(*x).cols();
                self.accumulate(grads, *x, |d| {
                    for (&(i, j), &g) in idx.iter().zip(gd) {
                        d[i * cols + j] += g;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mean(x) => {
                let g0 = gd[0] / self.value(*x).numel() as f32;
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g0));
            }
        }
    }
}
