//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the indices of its parents, so parents always precede children and
//! the tape is acyclic by construction. [`Graph::backward`] walks the tape
//! once in reverse, accumulating gradients into every node that depends on
//! a differentiable leaf.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, PoolKind, SoftmaxAxis};
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    Ln(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    SumSpatial(Var),
    Softmax {
        x: Var,
        axis: SoftmaxAxis,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Upsample(Var),
    Concat(Vec<Var>),
    CentralDiff {
        x: Var,
        axis: Axis,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Affine { .. } => "affine",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Sqrt(_) => "sqrt",
            Op::Ln(_) => "ln",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::SumSpatial(_) => "sum_spatial",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Pool { .. } => "pool",
            Op::Upsample(_) => "upsample",
            Op::Concat(_) => "concat",
            Op::CentralDiff { .. } => "central_diff",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    /// Gradients of every named parameter leaf.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.wrt(*v)))
            .collect()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    non_finite: Option<String>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(format!("{} (node {})", op.name(), self.nodes.len()));
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An anonymous differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A named differentiable leaf; reported by [`Gradients::named`].
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        let v = self.leaf(t);
        self.params.push((name.into(), v));
        v
    }

    /// Copy of `x` cut off from gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or(Error::shape("broadcast", sa, sb))?;
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let out = if sa == sb {
            self.value(a).zip_map(self.value(b), f)?
        } else {
            let (va, vb) = (self.value(a), self.value(b));
            let (st_a, st_b) = (bstrides(sa), bstrides(sb));
            let mut out = Tensor::zeros(out_shape);
            for_each_index(out_shape, |o, idx| {
                out.data_mut()[o] = f(va.data()[dot(idx, st_a)], vb.data()[dot(idx, st_b)]);
            });
            out
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary { kind, a, b }, rg))
    }

    /// Elementwise sum with unit-dimension broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg)
    }

    /// Absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(out, Op::Abs(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::sqrt);
        let rg = self.rg(x);
        self.push(out, Op::Sqrt(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        self.push(out, Op::Ln(x), rg)
    }

    /// Hard clamp; gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// Sum of all entries as a `1x1x1x1` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `h, w`: `n x c x h x w -> n x c x 1 x 1`.
    pub fn sum_spatial(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let hw = s.h() * s.w();
        let data = self
            .value(x)
            .data()
            .chunks(hw.max(1))
            .map(|c| c.iter().sum())
            .collect();
        let out = Tensor::from_vec(Shape::new(s.n(), s.c(), 1, 1), data).expect("shape");
        let rg = self.rg(x);
        self.push(out, Op::SumSpatial(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: SoftmaxAxis) -> Var {
        let out = kernels::softmax(self.value(x), axis);
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x, axis }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let out = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta }, rg))
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (out, argmax) = kernels::pool(self.value(x), kind)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Pool { x, kind, argmax }, rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample_bilinear_x2(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample(x), rg))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.n() != s0.n() || s.h() != s0.h() || s.w() != s0.w() {
                return Err(Error::shape("concat", s0, s));
            }
            c += s.c();
        }
        let out_shape = s0.with_c(c);
        let hw = s0.h() * s0.w();
        let mut data = Vec::with_capacity(out_shape.numel());
        for b in 0..s0.n() {
            for &x in xs {
                let v = self.value(x);
                let per = v.shape().c() * hw;
                data.extend_from_slice(&v.data()[b * per..(b + 1) * per]);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(out, Op::Concat(xs.to_vec()), rg))
    }

    /// Central difference along `axis` with replicated borders:
    /// `(x[i+1] - x[i-1]) / 2`, indices clamped to the valid range.
    pub fn central_diff(&mut self, x: Var, axis: Axis) -> Var {
        let v = self.value(x);
        let s = v.shape();
        let mut out = Tensor::zeros(s);
        let (h, w) = (s.h(), s.w());
        for plane in 0..s.n() * s.c() {
            let src = &v.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data_mut()[plane * h * w..(plane + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let (lo, hi) = diff_taps(axis, y, xx, h, w);
                    dst[y * w + xx] = 0.5 * (src[hi] - src[lo]);
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::CentralDiff { x, axis }, rg)
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if let Some(op) = &self.non_finite {
            return Err(Error::NonFinite(op.clone()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let cg = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *stride,
                    *pad,
                    g,
                    self.rg(*x),
                )?;
                if let Some(dx) = cg.input {
                    acc(*x, dx);
                }
                acc(*w, cg.weight);
                if let Some(b) = b {
                    let bs = self.shape(*b);
                    acc(*b, cg.bias.reshape(bs)?);
                }
            }
            Op::Relu(x) => {
                let d = self.value(*x).zip_map(g, |v, g| if v > 0.0 { g } else { 0.0 })?;
                acc(*x, d);
            }
            Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                if sa == sb {
                    let (da, db) = match kind {
                        BinaryKind::Add => (self.rg(*a).then(|| g.clone()), self.rg(*b).then(|| g.clone())),
                        BinaryKind::Sub => (self.rg(*a).then(|| g.clone()), self.rg(*b).then(|| g.map(|v| -v))),
                        BinaryKind::Mul => (
                            self.rg(*a).then(|| g.zip_map(vb, |g, x2| g * x2)).transpose()?,
                            self.rg(*b).then(|| g.zip_map(va, |g, x1| g * x1)).transpose()?,
                        ),
                        BinaryKind::Div => (
                            self.rg(*a).then(|| g.zip_map(vb, |g, x2| g / x2)).transpose()?,
                            match self.rg(*b) {
                                true => Some(Tensor::from_vec(
                                    sb,
                                    g.data()
                                        .iter()
                                        .zip(va.data())
                                        .zip(vb.data())
                                        .map(|((g, x1), x2)| -g * x1 / (x2 * x2))
                                        .collect(),
                                )?),
                                false => None,
                            },
                        ),
                    };
                    if let Some(da) = da {
                        acc(*a, da);
                    }
                    if let Some(db) = db {
                        acc(*b, db);
                    }
                    return Ok(());
                }
                let (st_a, st_b) = (bstrides(sa), bstrides(sb));
                let mut da = Tensor::zeros(sa);
                let mut db = Tensor::zeros(sb);
                for_each_index(y.shape(), |o, idx| {
                    let (ia, ib) = (dot(idx, st_a), dot(idx, st_b));
                    let gv = g.data()[o];
                    let (x1, x2) = (va.data()[ia], vb.data()[ib]);
                    let (ga, gb) = match kind {
                        BinaryKind::Add => (gv, gv),
                        BinaryKind::Sub => (gv, -gv),
                        BinaryKind::Mul => (gv * x2, gv * x1),
                        BinaryKind::Div => (gv / x2, -gv * x1 / (x2 * x2)),
                    };
                    da.data_mut()[ia] += ga;
                    db.data_mut()[ib] += gb;
                });
                acc(*a, da);
                acc(*b, db);
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * scale)),
            Op::Square(x) => acc(*x, self.value(*x).zip_map(g, |v, g| 2.0 * v * g)?),
            Op::Abs(x) => {
                let d = self.value(*x).zip_map(g, |v, g| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })?;
                acc(*x, d);
            }
            Op::Sqrt(x) => acc(*x, y.zip_map(g, |s, g| 0.5 * g / s)?),
            Op::Ln(x) => acc(*x, self.value(*x).zip_map(g, |v, g| g / v)?),
            Op::Clamp { x, lo, hi } => {
                let d = self.value(*x).zip_map(g, |v, g| {
                    if v > *lo && v < *hi {
                        g
                    } else {
                        0.0
                    }
                })?;
                acc(*x, d);
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.item())),
            Op::SumSpatial(x) => {
                let s = self.shape(*x);
                let hw = s.h() * s.w();
                let mut d = Tensor::zeros(s);
                for (chunk, &gv) in d.data_mut().chunks_mut(hw.max(1)).zip(g.data()) {
                    chunk.fill(gv);
                }
                acc(*x, d);
            }
            Op::Softmax { x, axis } => acc(*x, kernels::softmax_backward(y, *axis, g)),
            Op::LayerNorm { x, gamma, beta } => {
                let lg = kernels::layer_norm_backward(self.value(*x), self.value(*gamma), g);
                acc(*x, lg.input);
                acc(*gamma, lg.gamma.reshape(self.shape(*gamma))?);
                acc(*beta, lg.beta.reshape(self.shape(*beta))?);
            }
            Op::Pool { x, kind, argmax } => {
                acc(*x, kernels::pool_backward(self.shape(*x), *kind, argmax, g));
            }
            Op::Upsample(x) => acc(*x, kernels::upsample_bilinear_x2_backward(self.shape(*x), g)),
            Op::Concat(xs) => {
                let s = y.shape();
                let hw = s.h() * s.w();
                let mut offset = 0;
                for &x in xs {
                    let sx = self.shape(x);
                    let per = sx.c() * hw;
                    let mut d = Tensor::zeros(sx);
                    for b in 0..s.n() {
                        let src = b * s.c() * hw + offset;
                        d.data_mut()[b * per..(b + 1) * per]
                            .copy_from_slice(&g.data()[src..src + per]);
                    }
                    offset += per;
                    acc(x, d);
                }
            }
            Op::CentralDiff { x, axis } => {
                let s = self.shape(*x);
                let (h, w) = (s.h(), s.w());
                let mut d = Tensor::zeros(s);
                for plane in 0..s.n() * s.c() {
                    let gp = &g.data()[plane * h * w..(plane + 1) * h * w];
                    let dp = &mut d.data_mut()[plane * h * w..(plane + 1) * h * w];
                    for yy in 0..h {
                        for xx in 0..w {
                            let (lo, hi) = diff_taps(*axis, yy, xx, h, w);
                            let gv = 0.5 * gp[yy * w + xx];
                            dp[hi] += gv;
                            dp[lo] -= gv;
                        }
                    }
                }
                acc(*x, d);
            }
        }
        Ok(())
    }
}

fn diff_taps(axis: Axis, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
    match axis {
        Axis::X => (y * w + x.saturating_sub(1), y * w + (x + 1).min(w - 1)),
        Axis::Y => (y.saturating_sub(1) * w + x, (y + 1).min(h - 1) * w + x),
    }
}

fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a.0[i], b.0[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(Shape(out))
}

/// Row-major strides with zero stride on unit (broadcast) dimensions.
fn bstrides(s: Shape) -> [usize; 4] {
    let mut st = s.strides();
    for (i, d) in s.0.iter().enumerate() {
        if *d == 1 {
            st[i] = 0;
        }
    }
    st
}

#[inline]
fn dot(idx: [usize; 4], st: [usize; 4]) -> usize {
    idx[0] * st[0] + idx[1] * st[1] + idx[2] * st[2] + idx[3] * st[3]
}

fn for_each_index(s: Shape, mut f: impl FnMut(usize, [usize; 4])) {
    let mut o = 0;
    for a in 0..s.0[0] {
        for b in 0..s.0[1] {
            for c in 0..s.0[2] {
                for d in 0..s.0[3] {
                    f(o, [a, b, c, d]);
                    o += 1;
                }
            }
        }
    }
}
