//! Reverse-mode differentiation over an append-only operation record.
//!
//! Nodes are appended in execution order, so walking the record backwards is
//! a valid topological order and visits each operation exactly once. Leaves
//! created with [`Graph::param`] receive gradients; leaves created with
//! [`Graph::constant`] do not, and nothing upstream of them is differentiated
//! unless some other input requires it.

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        src: Var,
        start: usize,
        end: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    L1 {
        pred: Var,
        target: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::Relu(a) | Op::Scale(a, _) | Op::Sum(a) | Op::Mean(a) => vec![a],
            Op::SliceChannels { src, .. } => vec![src],
            Op::Concat { a, b } | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::L1 { pred, target } => vec![pred, target],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations and their values.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// A differentiable leaf. Its value is copied in without the grad slot.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on `v` by [`Graph::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Direct inputs of the operation that produced `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Number of recorded operations reading `v`.
    pub fn uses(&self, v: Var) -> usize {
        self.nodes
            .iter()
            .map(|n| n.op.inputs().iter().filter(|&&i| i == v).count())
            .sum()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        pad: usize,
        stride: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.shape(input),
            self.shape(weight),
            self.shape(bias),
            pad,
            stride,
        )?;
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(geom.out_shape(), out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Elementwise `max(0, x)`. The subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Stacks `b` after `a` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        for (dim, e, g) in [("batch", n, nb), ("height", h, hb), ("width", w, wb)] {
            if e != g {
                return Err(Error::Shape {
                    op: "concat_channels",
                    dim: dim.into(),
                    expected: e,
                    got: g,
                });
            }
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (sa + sb));
        for s in 0..n {
            out.extend_from_slice(&da[s * sa..(s + 1) * sa]);
            out.extend_from_slice(&db[s * sb..(s + 1) * sb]);
        }
        let value = Tensor::new([n, ca + cb, h, w], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// Channels `start..end` of an NCHW tensor.
    pub fn slice_channels(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(src).dims4("slice_channels")?;
        if start > end || end > c {
            return Err(Error::Invalid(format!(
                "slice_channels: range {start}..{end} outside 0..{c}"
            )));
        }
        let plane = h * w;
        let d = self.value(src).data();
        let mut out = Vec::with_capacity(n * (end - start) * plane);
        for s in 0..n {
            out.extend_from_slice(&d[(s * c + start) * plane..(s * c + end) * plane]);
        }
        let value = Tensor::new([n, end - start, h, w], out)?;
        let rg = self.any_grad(&[src]);
        Ok(self.push(value, Op::SliceChannels { src, start, end }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("add", self.value(a), self.value(b))?;
        let d: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), d)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("mul", self.value(a), self.value(b))?;
        let d: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), d)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Mean absolute difference. The subgradient of `|0|` is zero.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        ensure_same_shape("l1_loss", self.value(pred), self.value(target))?;
        let (p, t) = (self.value(pred), self.value(target));
        let m = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / p.numel() as f64;
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(m), Op::L1 { pred, target }, rg))
    }

    /// Propagates d(loss)/d(node) to every differentiable node, then adds the
    /// result into the grad slot of each [`Graph::param`] leaf. Leaf grads
    /// accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {
                    self.nodes[idx].value.accumulate_grad(&dy);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let mut dw = vec![0.0; self.value(weight).numel()];
                    let mut db = vec![0.0; self.value(bias).numel()];
                    let mut dx = self
                        .requires_grad(input)
                        .then(|| vec![0.0; self.value(input).numel()]);
                    conv::backward(
                        &geom,
                        self.value(input).data(),
                        self.value(weight).data(),
                        &dy,
                        dx.as_deref_mut(),
                        &mut dw,
                        &mut db,
                    );
                    if let Some(dx) = dx {
                        self.send(&mut adj, input, dx);
                    }
                    self.send(&mut adj, weight, dw);
                    self.send(&mut adj, bias, db);
                }
                Op::Relu(x) => {
                    let dx = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(&dy)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.send(&mut adj, x, dx);
                }
                Op::Concat { a, b } => {
                    let [n, ca, h, w] = self.value(a).dims4("concat_channels")?;
                    let cb = self.value(b).shape()[1];
                    let (sa, sb) = (ca * h * w, cb * h * w);
                    let mut da = Vec::with_capacity(n * sa);
                    let mut db = Vec::with_capacity(n * sb);
                    for s in 0..n {
                        let chunk = &dy[s * (sa + sb)..(s + 1) * (sa + sb)];
                        da.extend_from_slice(&chunk[..sa]);
                        db.extend_from_slice(&chunk[sa..]);
                    }
                    self.send(&mut adj, a, da);
                    self.send(&mut adj, b, db);
                }
                Op::SliceChannels { src, start, end } => {
                    let [n, c, h, w] = self.value(src).dims4("slice_channels")?;
                    let plane = h * w;
                    let width = (end - start) * plane;
                    let mut ds = vec![0.0; n * c * plane];
                    for s in 0..n {
                        ds[(s * c + start) * plane..(s * c + end) * plane]
                            .copy_from_slice(&dy[s * width..(s + 1) * width]);
                    }
                    self.send(&mut adj, src, ds);
                }
                Op::Add(a, b) => {
                    self.send(&mut adj, a, dy.clone());
                    self.send(&mut adj, b, dy);
                }
                Op::Mul(a, b) => {
                    let da = dy
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(g, v)| g * v)
                        .collect();
                    let db = dy
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.send(&mut adj, a, da);
                    self.send(&mut adj, b, db);
                }
                Op::Scale(a, s) => {
                    self.send(&mut adj, a, dy.iter().map(|g| g * s).collect());
                }
                Op::Sum(a) => {
                    let n = self.value(a).numel();
                    self.send(&mut adj, a, vec![dy[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(a).numel();
                    self.send(&mut adj, a, vec![dy[0] / n as f64; n]);
                }
                Op::L1 { pred, target } => {
                    let n = self.value(pred).numel() as f64;
                    let g = dy[0] / n;
                    let dp: Vec<f64> = self
                        .value(pred)
                        .data()
                        .iter()
                        .zip(self.value(target).data())
                        .map(|(p, t)| {
                            let d = p - t;
                            if d > 0.0 {
                                g
                            } else if d < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    if self.requires_grad(target) {
                        let dt = dp.iter().map(|v| -v).collect();
                        self.send(&mut adj, target, dt);
                    }
                    self.send(&mut adj, pred, dp);
                }
            }
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<f64>>], to: Var, g: Vec<f64>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut adj[to.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}
