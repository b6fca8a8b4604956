//! The differentiation tape.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so the backward sweep walks the node list in reverse.

use std::borrow::Cow;

use rand::Rng;

use super::conv::{self, Geom, Padding};
use super::gemm::gemm;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: Geom, cols: Vec<f64> },
    ConvT2d { u: Var, w: Var, b: Var, geom: Geom },
    Dense { x: Var, w: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    Mask { x: Var, mask: Vec<f64> },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<f64>, probs: Vec<f64>, scale: f64 },
    Reparam { mu: Var, logvar: Var, eps: Vec<f64> },
    Kl { mu: Var, logvar: Var, scale: f64 },
    SqError { a: Var, b: Var, scale: f64 },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Tape of tensor operations. Parameters can be borrowed into the graph
/// without copying.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    nonfinite: Option<usize>,
}

/// Result of a backward sweep: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    let rows = s.first().copied().unwrap_or(1);
    (rows, t.len() / rows.max(1))
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Owned leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Owned leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Borrowed leaf; `needs_grad` decides whether it receives a gradient.
    pub fn borrowed(&mut self, t: &'a Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x [n, cin, h, w]`, `w [cout, cin, kh, kw]`, `b [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: Padding) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let geom = Geom::conv(xt.shape(), wt.shape(), pad)?;
        if bt.len() != geom.cout {
            return Err(dim_err("conv2d bias", wt, bt));
        }
        let keep = self.nodes[w.0].needs_grad;
        let (y, cols) = conv::conv_forward(&geom, xt.data(), wt.data(), bt.data(), keep);
        let out = Tensor::new(&[geom.n, geom.cout, geom.ho, geom.wo], y)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, ng))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with the same
    /// padding. `u [n, cin, h, w]`, `w [cin, cout, kh, kw]`, `b [cout]`.
    pub fn conv_transpose2d(&mut self, u: Var, w: Var, b: Var, pad: Padding) -> Result<Var> {
        let (ut, wt, bt) = (self.value(u), self.value(w), self.value(b));
        let geom = Geom::transposed(ut.shape(), wt.shape(), pad)?;
        if bt.len() != geom.cin {
            return Err(dim_err("conv_transpose2d bias", wt, bt));
        }
        let z = conv::conv_t_forward(&geom, ut.data(), wt.data(), bt.data());
        let out = Tensor::new(&[geom.n, geom.cin, geom.h, geom.w], z)?;
        let ng = self.ng(&[u, w, b]);
        Ok(self.push(out, Op::ConvT2d { u, w, b, geom }, ng))
    }

    /// `x [n, ...]` flattened per row, `w [in, out]`, `b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (n, din) = as_matrix(xt);
        if wt.shape().len() != 2 || wt.shape()[0] != din {
            return Err(dim_err("dense", xt, wt));
        }
        let dout = wt.shape()[1];
        if bt.len() != dout {
            return Err(dim_err("dense bias", wt, bt));
        }
        let mut y = Vec::with_capacity(n * dout);
        for _ in 0..n {
            y.extend_from_slice(bt.data());
        }
        gemm(n, din, dout, 1.0, xt.data(), false, wt.data(), false, 1.0, &mut y);
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(Tensor::new(&[n, dout], y)?, Op::Dense { x, w, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y: Vec<f64> = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape(), y).expect("same size");
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y: Vec<f64> = t.data().iter().map(|&v| v.tanh()).collect();
        let out = Tensor::new(t.shape(), y).expect("same size");
        let ng = self.ng(&[x]);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Inverted dropout. With `rng == None` (evaluation) this is the identity
    /// and adds no node.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Var {
        let Some(rng) = rng else { return x };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let y: Vec<f64> = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(t.shape(), y).expect("same size");
        let ng = self.ng(&[x]);
        self.push(out, Op::Mask { x, mask }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        at.same_shape(bt, name)?;
        let y: Vec<f64> = at.data().iter().zip(bt.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(at.shape(), y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let y: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(t.shape(), y).expect("same size");
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || start + len > t.shape()[1] {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let mut y = Vec::with_capacity(n * len);
        for r in 0..n {
            y.extend_from_slice(&t.data()[r * c + start..r * c + start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[n, len], y)?, Op::SliceCols { x, start }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let c = t.shape()[1];
        let mut y = t.data().to_vec();
        for row in y.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape(), y)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Softmax cross-entropy between `logits [n, c]` and target
    /// distributions `[n, c]`, summed or averaged over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor, reduction: Reduction) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape() != targets.shape() {
            return Err(dim_err("cross_entropy", t, targets));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n.max(1) as f64,
        };
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (z, y) in t.data().chunks(c).zip(targets.data().chunks(c)) {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += y.iter().zip(z).map(|(yk, zk)| yk * (lse - zk)).sum::<f64>();
        }
        for row in probs.chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
                scale,
            },
            ng,
        ))
    }

    /// `mu + exp(logvar / 2) * eps` with the noise supplied by the caller.
    pub fn gaussian_reparam(&mut self, mu: Var, logvar: Var, eps: &Tensor) -> Result<Var> {
        let (m, l) = (self.value(mu), self.value(logvar));
        m.same_shape(l, "gaussian_reparam")?;
        m.same_shape(eps, "gaussian_reparam noise")?;
        let z: Vec<f64> = m
            .data()
            .iter()
            .zip(l.data())
            .zip(eps.data())
            .map(|((a, b), e)| a + (0.5 * b).exp() * e)
            .collect();
        let out = Tensor::new(m.shape(), z)?;
        let ng = self.ng(&[mu, logvar]);
        Ok(self.push(
            out,
            Op::Reparam {
                mu,
                logvar,
                eps: eps.data().to_vec(),
            },
            ng,
        ))
    }

    /// KL divergence of `N(mu, exp(logvar))` from `N(0, I)`, summed over
    /// latent dimensions and reduced over rows.
    pub fn kl_divergence(&mut self, mu: Var, logvar: Var, reduction: Reduction) -> Result<Var> {
        let (m, l) = (self.value(mu), self.value(logvar));
        m.same_shape(l, "kl_divergence")?;
        let rows = as_matrix(m).0;
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / rows.max(1) as f64,
        };
        let kl: f64 = m
            .data()
            .iter()
            .zip(l.data())
            .map(|(a, b)| -0.5 * (1.0 + b - a * a - b.exp()))
            .sum();
        let ng = self.ng(&[mu, logvar]);
        Ok(self.push(Tensor::scalar(kl * scale), Op::Kl { mu, logvar, scale }, ng))
    }

    /// `scale * sum((a - b)^2)`.
    pub fn sq_error(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        at.same_shape(bt, "sq_error")?;
        let s: f64 = at.data().iter().zip(bt.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(s * scale), Op::SqError { a, b, scale }, ng))
    }

    /// Reverse sweep from a one-element output, seeded with 1.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let root = self.value(out);
        if root.len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: root.shape().to_vec(),
                rhs: vec![1],
            });
        }
        self.backward_with(out, Tensor::full(root.shape(), 1.0))
    }

    /// Fails if any operation so far produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some(i) => Err(Error::Numeric(format!("non-finite value produced at node {i}"))),
            None => Ok(()),
        }
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        self.check_finite()?;
        self.value(out).same_shape(&seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(d) = self.slot(grads, v) {
            for (j, x) in d.iter_mut().enumerate() {
                *x += f(j);
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut dw = self.slot(grads, *w).map(|s| s.to_vec());
                let mut db = self.slot(grads, *b).map(|s| s.to_vec());
                let mut dx = self.slot(grads, *x).map(|s| s.to_vec());
                conv::conv_backward(
                    geom,
                    xv.data(),
                    cols,
                    wv.data(),
                    gd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.store(grads, *w, dw);
                self.store(grads, *b, db);
                self.store(grads, *x, dx);
            }
            Op::ConvT2d { u, w, b, geom } => {
                let (uv, wv) = (self.value(*u), self.value(*w));
                let mut dw = self.slot(grads, *w).map(|s| s.to_vec());
                let mut db = self.slot(grads, *b).map(|s| s.to_vec());
                let mut du = self.slot(grads, *u).map(|s| s.to_vec());
                conv::conv_t_backward(
                    geom,
                    uv.data(),
                    wv.data(),
                    gd,
                    du.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.store(grads, *w, dw);
                self.store(grads, *b, db);
                self.store(grads, *u, du);
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din) = as_matrix(xv);
                let dout = wv.shape()[1];
                if let Some(d) = self.slot(grads, *w) {
                    gemm(din, n, dout, 1.0, xv.data(), true, gd, false, 1.0, d);
                }
                if let Some(d) = self.slot(grads, *b) {
                    for row in gd.chunks(dout) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *x) {
                    gemm(n, dout, din, 1.0, gd, false, wv.data(), true, 1.0, d);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |j| if xv[j] > 0.0 { gd[j] } else { 0.0 });
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data();
                self.acc(grads, *x, |j| gd[j] * (1.0 - y[j] * y[j]));
            }
            Op::Mask { x, mask } => self.acc(grads, *x, |j| gd[j] * mask[j]),
            Op::Reshape(x) => self.acc(grads, *x, |j| gd[j]),
            Op::Add(a, b) => {
                self.acc(grads, *a, |j| gd[j]);
                self.acc(grads, *b, |j| gd[j]);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |j| gd[j]);
                self.acc(grads, *b, |j| -gd[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |j| gd[j] * bv[j]);
                self.acc(grads, *b, |j| gd[j] * av[j]);
            }
            Op::Scale(x, c) => self.acc(grads, *x, |j| gd[j] * c),
            Op::SliceCols { x, start } => {
                let c = self.value(*x).shape()[1];
                let len = g.shape()[1];
                if let Some(d) = self.slot(grads, *x) {
                    for (r, row) in gd.chunks(len).enumerate() {
                        for (k, v) in row.iter().enumerate() {
                            d[r * c + start + k] += v;
                        }
                    }
                }
            }
            Op::Sum(x) => self.acc(grads, *x, |_| gd[0]),
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let c = self.nodes[i].value.shape()[1];
                let dots: Vec<f64> = y
                    .chunks(c)
                    .zip(gd.chunks(c))
                    .map(|(s, u)| s.iter().zip(u).map(|(p, q)| p * q).sum())
                    .collect();
                self.acc(grads, *x, |j| y[j] * (gd[j] - dots[j / c]));
            }
            Op::CrossEntropy { logits, targets, probs, scale } => {
                let c = self.value(*logits).shape()[1];
                let mass: Vec<f64> = targets.chunks(c).map(|r| r.iter().sum()).collect();
                let s = gd[0] * scale;
                self.acc(grads, *logits, |j| s * (probs[j] * mass[j / c] - targets[j]));
            }
            Op::Reparam { mu, logvar, eps } => {
                let lv = self.value(*logvar).data();
                self.acc(grads, *mu, |j| gd[j]);
                self.acc(grads, *logvar, |j| gd[j] * 0.5 * (0.5 * lv[j]).exp() * eps[j]);
            }
            Op::Kl { mu, logvar, scale } => {
                let (m, lv) = (self.value(*mu).data(), self.value(*logvar).data());
                let s = gd[0] * scale;
                self.acc(grads, *mu, |j| s * m[j]);
                self.acc(grads, *logvar, |j| s * 0.5 * (lv[j].exp() - 1.0));
            }
            Op::SqError { a, b, scale } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * gd[0] * scale;
                self.acc(grads, *a, |j| s * (av[j] - bv[j]));
                self.acc(grads, *b, |j| -s * (av[j] - bv[j]));
            }
        }
    }

    fn store(&self, grads: &mut [Option<Tensor>], v: Var, d: Option<Vec<f64>>) {
        if let (Some(d), Some(slot)) = (d, self.slot(grads, v)) {
            slot.copy_from_slice(&d);
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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
