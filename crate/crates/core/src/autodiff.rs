//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value and the
//! handles of its operands. [`Tape::backward`] walks the tape from the root
//! back to the first node, so gradients reaching a node along several paths
//! are summed before the node propagates further.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::math;
use crate::tensor::{Shape5, Tensor5};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    AvgPool { input: Var, window: usize },
    LeakyRelu { input: Var, slope: f64 },
    Sigmoid { input: Var },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    GlobalAvgPool { input: Var },
    Upsample { input: Var, factor: usize },
    Warp { input: Var, field: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sqrt(Var),
    ChannelScale { input: Var, weights: Var },
    Concat(Var, Var),
    BoxSum { input: Var, n: usize },
    Sum(Var),
    SmoothPenalty(Var),
}

struct Node {
    value: Tensor5,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor5>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor5) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor5) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// New constant leaf carrying the current value of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor5 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape5 {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor5> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor5, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor5, op: Op, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, op, rg)
    }

    // ── primitives ───────────────────────────────────────────────────

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let value = kernels::conv3d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut ins = alloc::vec![input, kernel];
        ins.extend(bias);
        Ok(self.record(
            value,
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &ins,
        ))
    }

    pub fn avg_pool3d(&mut self, input: Var, window: usize) -> Result<Var> {
        let value = kernels::avg_pool3d(self.value(input), window)?;
        Ok(self.record(value, Op::AvgPool { input, window }, &[input]))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let value = self.value(input).map(|x| if x >= 0.0 { x } else { slope * x });
        self.record(value, Op::LeakyRelu { input, slope }, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(math::sigmoid);
        self.record(value, Op::Sigmoid { input }, &[input])
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let value = kernels::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut ins = alloc::vec![input, weight];
        ins.extend(bias);
        Ok(self.record(value, Op::Linear { input, weight, bias }, &ins))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let value = kernels::global_avg_pool(self.value(input));
        self.record(value, Op::GlobalAvgPool { input }, &[input])
    }

    pub fn upsample_trilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        let value = kernels::upsample_trilinear(self.value(input), factor)?;
        Ok(self.record(value, Op::Upsample { input, factor }, &[input]))
    }

    /// Samples `input` at `x + field(x)`; see [`kernels::warp`].
    pub fn warp(&mut self, input: Var, field: Var) -> Result<Var> {
        let value = kernels::warp(self.value(input), self.value(field))?;
        Ok(self.record(value, Op::Warp { input, field }, &[input, field]))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same_shape(vb, name)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor5::from_vec(va.shape(), data)?;
        Ok(self.record(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scaled(k);
        self.record(value, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        self.record(value, Op::AddScalar(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(math::sqrt);
        self.record(value, Op::Sqrt(a), &[a])
    }

    /// `input[b, c, ...] * weights[b, c]` with weights shaped (B, C, 1, 1, 1).
    pub fn channel_scale(&mut self, input: Var, weights: Var) -> Result<Var> {
        let value = kernels::channel_scale(self.value(input), self.value(weights))?;
        Ok(self.record(value, Op::ChannelScale { input, weights }, &[input, weights]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.record(value, Op::Concat(a, b), &[a, b]))
    }

    pub fn box_sum(&mut self, input: Var, n: usize) -> Var {
        let value = kernels::box_sum(self.value(input), n);
        self.record(value, Op::BoxSum { input, n }, &[input])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor5::scalar(self.value(a).sum());
        self.record(value, Op::Sum(a), &[a])
    }

    /// Sum of squared forward differences of every channel along every axis.
    pub fn smooth_penalty(&mut self, a: Var) -> Var {
        let value = Tensor5::scalar(kernels::smooth_penalty(self.value(a)));
        self.record(value, Op::SmoothPenalty(a), &[a])
    }

    // ── reverse sweep ────────────────────────────────────────────────

    /// Populates `grad` on every node that `root` depends on and that
    /// requires a gradient. Earlier gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if !rs.is_scalar() {
            return Err(Error::NonScalarRoot(rs));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor5::full(rs, 1.0));
        let mut contributions: Vec<(Var, Tensor5)> = Vec::new();
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            contributions.clear();
            self.node_vjp(i, &g, &mut contributions)?;
            self.nodes[i].grad = Some(g);
            for (v, cg) in contributions.drain(..) {
                let node = &mut self.nodes[v.0];
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(cg.data()) {
                            *a += c;
                        }
                    }
                    None => node.grad = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_vjp(&self, i: usize, g: &Tensor5, out: &mut Vec<(Var, Tensor5)>) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let grads = kernels::conv3d_backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    stride,
                    padding,
                    self.wants(input),
                    self.wants(kernel),
                    bias.is_some_and(|b| self.wants(b)),
                )?;
                if let Some(gx) = grads.input {
                    out.push((input, gx));
                }
                if let Some(gw) = grads.kernel {
                    out.push((kernel, gw));
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    let shape = self.shape(b);
                    out.push((b, gb.reshape(shape)?));
                }
            }
            Op::AvgPool { input, window } => {
                out.push((input, kernels::avg_pool3d_backward(self.shape(input), g, window)));
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv >= 0.0 { gv } else { slope * gv })
                    .collect();
                out.push((input, Tensor5::from_vec(x.shape(), data)?));
            }
            Op::Sigmoid { input } => {
                let data = y.data().iter().zip(g.data()).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                out.push((input, Tensor5::from_vec(y.shape(), data)?));
            }
            Op::Linear { input, weight, bias } => {
                let (gx, gw, gb) = kernels::linear_backward(self.value(input), self.value(weight), g);
                if self.wants(input) {
                    out.push((input, gx));
                }
                if self.wants(weight) {
                    out.push((weight, gw));
                }
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    let shape = self.shape(b);
                    out.push((b, gb.reshape(shape)?));
                }
            }
            Op::GlobalAvgPool { input } => {
                out.push((input, kernels::global_avg_pool_backward(self.shape(input), g)));
            }
            Op::Upsample { input, factor } => {
                out.push((input, kernels::upsample_trilinear_backward(self.shape(input), g, factor)));
            }
            Op::Warp { input, field } => {
                let grads = kernels::warp_backward(
                    self.value(input),
                    self.value(field),
                    g,
                    self.wants(input),
                    self.wants(field),
                )?;
                if let Some(gi) = grads.input {
                    out.push((input, gi));
                }
                if let Some(gf) = grads.field {
                    out.push((field, gf));
                }
            }
            Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.scaled(-1.0)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    out.push((a, zip_map(g, vb, |gv, bv| gv * bv)?));
                }
                if self.wants(b) {
                    out.push((b, zip_map(g, va, |gv, av| gv * av)?));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(b);
                if self.wants(a) {
                    out.push((a, zip_map(g, vb, |gv, bv| gv / bv)?));
                }
                if self.wants(b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = zip_map(g, y, |gv, yv| -gv * yv)?;
                    out.push((b, zip_map(&t, vb, |tv, bv| tv / bv)?));
                }
            }
            Op::Scale(a, k) => out.push((a, g.scaled(k))),
            Op::AddScalar(a) => out.push((a, g.clone())),
            Op::Sqrt(a) => out.push((a, zip_map(g, y, |gv, yv| gv * 0.5 / yv)?)),
            Op::ChannelScale { input, weights } => {
                if self.wants(input) {
                    out.push((input, kernels::channel_scale(g, self.value(weights))?));
                }
                if self.wants(weights) {
                    let x = self.value(input);
                    let s = x.shape();
                    let mut gw = Tensor5::zeros(self.shape(weights));
                    for b in 0..s.batch {
                        for c in 0..s.channels {
                            let dot: f64 = x.channel(b, c).iter().zip(g.channel(b, c)).map(|(p, q)| p * q).sum();
                            gw.data_mut()[b * s.channels + c] = dot;
                        }
                    }
                    out.push((weights, gw));
                }
            }
            Op::Concat(a, b) => {
                let (ga, gb) = kernels::split_channels(g, self.shape(a).channels);
                out.push((a, ga));
                out.push((b, gb));
            }
            Op::BoxSum { input, n } => out.push((input, kernels::box_sum(g, n))),
            Op::Sum(a) => out.push((a, Tensor5::full(self.shape(a), g.data()[0]))),
            Op::SmoothPenalty(a) => {
                out.push((a, kernels::smooth_penalty_backward(self.value(a), g.data()[0])));
            }
        }
        out.retain(|(v, _)| self.nodes[v.0].requires_grad);
        Ok(())
    }
}

fn zip_map(a: &Tensor5, b: &Tensor5, f: impl Fn(f64, f64) -> f64) -> Result<Tensor5> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor5::from_vec(a.shape(), data)
}
