//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every forward op appends a node holding its output and whatever it needs
//! for the backward sweep. [`Tape::backward`] walks the nodes in reverse
//! creation order, so each node is visited once and after all of its
//! consumers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ghost::{self, ClassLayout, LossBreakdown};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y = σ(x)`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "identity" => Activation::Identity,
            "relu" => Activation::Relu,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            _ => return None,
        })
    }
}

/// Which cross-entropy a [`Tape::cross_entropy`] node differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTarget {
    /// Softmax over all `c + e` logits.
    Extended,
    /// Softmax over the first `c` logits only; ghost columns get zero gradient.
    Original,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d(Var, Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    PadBottomRight(Var),
    Reshape(Var),
    Pointwise(Var, Activation),
    ConcatCols(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    HalfSquaredNorm(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        layout: ClassLayout,
        target: LossTarget,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    breakdowns: Vec<(Var, LossBreakdown)>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
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

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Loss decomposition recorded by a cross-entropy node.
    pub fn breakdown(&self, var: Var) -> Option<LossBreakdown> {
        self.breakdowns.iter().find(|(v, _)| *v == var).map(|(_, b)| *b)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `x[m×n] + b[n]`, broadcast over the leading batch dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let n = xs[1];
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    /// `x[N×F×H×W] + b[F]`, one bias per channel.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() != 4 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::Dimension {
                op: "add_channel_bias",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let plane = xs[2] * xs[3];
        let channels = xs[1];
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = bias[i % channels];
            chunk.iter_mut().for_each(|o| *o += bv);
        }
        self.push("add_channel_bias", out, Op::AddChannelBias(x, b), &[x, b])
    }

    /// Valid, stride-1 cross-correlation (no kernel flip).
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(k))?;
        self.push("conv2d", out, Op::Conv2d(x, k), &[x, k])
    }

    /// 2×2 max pool with stride 2. Ties resolve to the first maximal
    /// element in row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = maxpool2_forward(self.value(x))?;
        self.push("maxpool2", out, Op::MaxPool2 { input: x, argmax }, &[x])
    }

    /// Zero-pads the two trailing spatial dims of an `N×C×H×W` tensor at the
    /// bottom and right edges.
    pub fn pad_bottom_right(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || height < xs[2] || width < xs[3] {
            return Err(Error::Dimension {
                op: "pad_bottom_right",
                lhs: xs,
                rhs: vec![height, width],
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * height * width];
        for p in 0..n * c {
            for r in 0..h {
                let s = p * h * w + r * w;
                let d = p * height * width + r * width;
                out[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
        let out = Tensor::new(vec![n, c, height, width], out)?;
        self.push("pad_bottom_right", out, Op::PadBottomRight(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn pointwise(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(kind.name(), out, Op::Pointwise(x, kind), &[x])
    }

    /// Column-wise concatenation of `a[m×p]` and `b[m×q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asz, bsz) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asz.len() != 2 || bsz.len() != 2 || asz[0] != bsz[0] {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: asz,
                rhs: bsz,
            });
        }
        let (m, p, q) = (asz[0], asz[1], bsz[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&ad[r * p..(r + 1) * p]);
            out.extend_from_slice(&bd[r * q..(r + 1) * q]);
        }
        let out = Tensor::new(vec![m, p + q], out)?;
        self.push("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `½‖x‖²`
    pub fn half_squared_norm(&mut self, x: Var) -> Result<Var> {
        let s = 0.5 * self.value(x).data().iter().map(|v| v * v).sum::<f64>();
        self.push("half_squared_norm", Tensor::scalar(s), Op::HalfSquaredNorm(x), &[x])
    }

    /// Batch-mean softmax cross-entropy over `logits[batch×(c+e)]`.
    ///
    /// The node's value is `l_ext` for [`LossTarget::Extended`] and `l_orig`
    /// for [`LossTarget::Original`]; the full decomposition is available via
    /// [`Tape::breakdown`].
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        layout: ClassLayout,
        target: LossTarget,
    ) -> Result<Var> {
        let breakdown = ghost::ghost_softmax_ce(self.value(logits), labels, layout)?;
        let value = match target {
            LossTarget::Extended => breakdown.l_ext,
            LossTarget::Original => breakdown.l_orig,
        };
        let var = self.push(
            "cross_entropy",
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                layout,
                target,
            },
            &[logits],
        )?;
        self.breakdowns.push((var, breakdown));
        Ok(var)
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut accumulate = |v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(*a, matmul_nt(g, bv)?);
                }
                if self.wants(*b) {
                    accumulate(*b, matmul_tn(av, g)?);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(*x, g.clone());
                }
                if self.wants(*b) {
                    let n = self.shape(*b)[0];
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(*b, Tensor::new(vec![n], db)?);
                }
            }
            Op::AddChannelBias(x, b) => {
                if self.wants(*x) {
                    accumulate(*x, g.clone());
                }
                if self.wants(*b) {
                    let s = g.shape();
                    let plane = s[2] * s[3];
                    let channels = s[1];
                    let mut db = vec![0.0; channels];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        db[i % channels] += chunk.iter().sum::<f64>();
                    }
                    accumulate(*b, Tensor::new(vec![channels], db)?);
                }
            }
            Op::Conv2d(x, k) => {
                let (gx, gk) = conv2d_backward(self.value(*x), self.value(*k), g, self.wants(*x), self.wants(*k))?;
                if let Some(gx) = gx {
                    accumulate(*x, gx);
                }
                if let Some(gk) = gk {
                    accumulate(*k, gk);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if self.wants(*input) {
                    let mut gx = Tensor::zeros(self.shape(*input).to_vec())?;
                    let dst = gx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dst[src] += gv;
                    }
                    accumulate(*input, gx);
                }
            }
            Op::PadBottomRight(x) => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (ph, pw) = (g.shape()[2], g.shape()[3]);
                    let mut gx = Vec::with_capacity(n * c * h * w);
                    for p in 0..n * c {
                        for r in 0..h {
                            let s = p * ph * pw + r * pw;
                            gx.extend_from_slice(&g.data()[s..s + w]);
                        }
                    }
                    accumulate(*x, Tensor::new(xs.to_vec(), gx)?);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(*x, g.clone().reshape(self.shape(*x).to_vec())?);
                }
            }
            Op::Pointwise(x, kind) => {
                if self.wants(*x) {
                    let xin = self.value(*x).data();
                    let yout = node.value.data();
                    let data = g
                        .data()
                        .iter()
                        .zip(xin.iter().zip(yout))
                        .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                        .collect();
                    accumulate(*x, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.shape(*a)[1];
                let q = self.shape(*b)[1];
                let m = g.shape()[0];
                if self.wants(*a) {
                    let data = g.data().chunks(p + q).flat_map(|r| r[..p].to_vec()).collect();
                    accumulate(*a, Tensor::new(vec![m, p], data)?);
                }
                if self.wants(*b) {
                    let data = g.data().chunks(p + q).flat_map(|r| r[p..].to_vec()).collect();
                    accumulate(*b, Tensor::new(vec![m, q], data)?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(*a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(*b, g.clone());
                }
            }
            Op::Scale(x, factor) => {
                if self.wants(*x) {
                    accumulate(*x, g.map(|v| v * factor));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    accumulate(*x, Tensor::full(self.shape(*x).to_vec(), g.data()[0])?);
                }
            }
            Op::HalfSquaredNorm(x) => {
                if self.wants(*x) {
                    let s = g.data()[0];
                    accumulate(*x, self.value(*x).map(|v| v * s));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                layout,
                target,
            } => {
                if self.wants(*logits) {
                    let z = self.value(*logits);
                    let mut dz = match target {
                        LossTarget::Extended => ghost::ghost_softmax_ce_grad(z, labels, *layout)?,
                        LossTarget::Original => ghost::original_ce_grad(z, labels, *layout)?,
                    };
                    let s = g.data()[0];
                    if s != 1.0 {
                        dz.data_mut().iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(*logits, dz);
                }
            }
        }
        Ok(())
    }
}

/// Plain `a[m×k] · b[k×n]` without recording.
pub fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (asz, bsz) = (a.shape(), b.shape());
    if asz.len() != 2 || bsz.len() != 2 || asz[1] != bsz[0] {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: asz.to_vec(),
            rhs: bsz.to_vec(),
        });
    }
    let (m, k, n) = (asz[0], asz[1], bsz[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

// g[m×n] · bᵀ where b is [k×n]
fn matmul_nt(g: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let (gd, bd) = (g.data(), b.data());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = grow.iter().zip(&bd[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, k], out)
}

// aᵀ · g where a is [m×k], g is [m×n]
fn matmul_tn(a: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = g.shape()[1];
    let (ad, gd) = (a.data(), g.data());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

fn conv_dims(x: &Tensor, k: &Tensor) -> Result<[usize; 8]> {
    let (xs, ks) = (x.shape(), k.shape());
    if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || xs[2] < ks[2] || xs[3] < ks[3] {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    Ok([n, c, h, w, f, kh, kw, 0])
}

/// Valid cross-correlation without recording.
pub fn conv2d_forward(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let [n, c, h, w, f, kh, kw, _] = conv_dims(x, k)?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; n * f * oh * ow];
    for b in 0..n {
        for fo in 0..f {
            let obase = (b * f + fo) * oh * ow;
            let plane = &mut out[obase..obase + oh * ow];
            for ci in 0..c {
                let xbase = (b * c + ci) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kd[((fo * c + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let xrow = &xd[xbase + (oy + ky) * w + kx..][..ow];
                            for (o, &xv) in plane[oy * ow..(oy + 1) * ow].iter_mut().zip(xrow) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out)
}

fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    want_x: bool,
    want_k: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let [n, c, h, w, f, kh, kw, _] = conv_dims(x, k)?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let mut gx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
    let mut gk = if want_k { vec![0.0; kd.len()] } else { Vec::new() };
    for b in 0..n {
        for fo in 0..f {
            let gbase = (b * f + fo) * oh * ow;
            let gplane = &gd[gbase..gbase + oh * ow];
            for ci in 0..c {
                let xbase = (b * c + ci) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kidx = ((fo * c + ci) * kh + ky) * kw + kx;
                        if want_k {
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let xrow = &xd[xbase + (oy + ky) * w + kx..][..ow];
                                acc += gplane[oy * ow..(oy + 1) * ow]
                                    .iter()
                                    .zip(xrow)
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                            gk[kidx] += acc;
                        }
                        if want_x {
                            let wv = kd[kidx];
                            for oy in 0..oh {
                                let start = xbase + (oy + ky) * w + kx;
                                for (d, &gv) in gx[start..start + ow].iter_mut().zip(&gplane[oy * ow..(oy + 1) * ow]) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let gx = if want_x {
        Some(Tensor::new(x.shape().to_vec(), gx)?)
    } else {
        None
    };
    let gk = if want_k {
        Some(Tensor::new(k.shape().to_vec(), gk)?)
    } else {
        None
    };
    Ok((gx, gk))
}

/// 2×2/stride-2 max pool; returns the output and, per output element, the
/// flat input index that won.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let xs = x.shape();
    if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
        return Err(Error::Dimension {
            op: "maxpool2",
            lhs: xs.to_vec(),
            rhs: vec![2, 2],
        });
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}
