//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op as a node holding its forward value. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into the parameter leaves. All loops run sequentially in ascending index
//! order, so values and gradients are bitwise reproducible.

use std::collections::BTreeMap;

use super::ops::{group_norm_forward, group_stats, lse_slice, GroupLayout};
use super::tensor::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, k: NodeId, b: NodeId, geom: ConvGeom },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        lay: GroupLayout,
        stats: Vec<(f64, f64)>,
    },
    Relu { x: NodeId },
    SpatialMul { x: NodeId, e: NodeId },
    MeanPool { x: NodeId, spatial: usize, channels: usize },
    Reshape { x: NodeId },
    L2Normalize { x: NodeId, eps: f64, norms: Vec<f64> },
    SelectRows { x: NodeId, rows: Vec<usize> },
    Softmax { x: NodeId },
    LogSoftmax { x: NodeId },
    LogSumExp { x: NodeId },
    GatherCols { x: NodeId, idx: Vec<usize> },
    RowDot { x: NodeId, v: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Square { x: NodeId },
    Huber { x: NodeId, delta: f64 },
    Sum { x: NodeId },
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation over tensors of element type `R`.
pub struct Graph<R: Real = f32> {
    nodes: Vec<Node<R>>,
    params: BTreeMap<String, NodeId>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    /// Registers every tensor of `params` as a leaf. Non-trainable leaves take
    /// no gradient.
    pub fn bind_params(&mut self, params: &ParamSet<R>, trainable: bool) -> Result<()> {
        for (name, t) in params.iter() {
            if self.params.contains_key(name) {
                return Err(Error::invalid(format!("parameter `{name}` bound twice")));
            }
            let id = self.leaf(t.clone(), trainable);
            self.params.insert(name.clone(), id);
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<NodeId> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn constant(&mut self, t: Tensor<R>) -> NodeId {
        self.leaf(t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<R>, op: Op, rg: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NumericOverflow { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn v(&self, id: NodeId) -> &[R] {
        self.nodes[id.0].value.data()
    }

    /// `[R, I] · [I, O] + [O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] || bs != [ws[1]] {
            return Err(Error::invalid(format!(
                "linear shapes x={xs:?} w={ws:?} b={bs:?}"
            )));
        }
        let (rows, inp, out) = (xs[0], xs[1], ws[1]);
        let (xv, wv, bv) = (self.v(x), self.v(w), self.v(b));
        let mut y = vec![R::ZERO; rows * out];
        for r in 0..rows {
            let yr = &mut y[r * out..(r + 1) * out];
            yr.copy_from_slice(bv);
            for i in 0..inp {
                let a = xv[r * inp + i];
                if a == R::ZERO {
                    continue;
                }
                let wr = &wv[i * out..(i + 1) * out];
                for (yo, &wo) in yr.iter_mut().zip(wr) {
                    *yo += a * wo;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            "linear",
            Tensor::new(vec![rows, out], y)?,
            Op::Linear { x, w, b },
            rg,
        )
    }

    /// NHWC convolution with kernel `[K, K, Cin, Cout]` and "same"-style
    /// padding `(K - 1) / 2`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (xs, ks, bs) = (self.shape(x), self.shape(k), self.shape(b));
        if xs.len() != 4 || ks.len() != 4 || ks[0] != ks[1] || ks[2] != xs[3] || bs != [ks[3]] {
            return Err(Error::invalid(format!(
                "conv2d shapes x={xs:?} k={ks:?} b={bs:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let kernel = ks[0];
        let pad = (kernel - 1) / 2;
        let out_h = (xs[1] + 2 * pad - kernel) / stride + 1;
        let out_w = (xs[2] + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom {
            batch: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            in_c: xs[3],
            out_h,
            out_w,
            out_c: ks[3],
            kernel,
            stride,
            pad,
        };
        let g = geom;
        let (xv, kv, bv) = (self.v(x), self.v(k), self.v(b));
        let mut y = vec![R::ZERO; g.batch * g.out_h * g.out_w * g.out_c];
        for n in 0..g.batch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let o = ((n * g.out_h + oy) * g.out_w + ox) * g.out_c;
                    let yo = &mut y[o..o + g.out_c];
                    yo.copy_from_slice(bv);
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            let xi = ((n * g.in_h + iy as usize) * g.in_w + ix as usize) * g.in_c;
                            for ci in 0..g.in_c {
                                let a = xv[xi + ci];
                                if a == R::ZERO {
                                    continue;
                                }
                                let ki = ((ky * g.kernel + kx) * g.in_c + ci) * g.out_c;
                                for (yv, &kw) in yo.iter_mut().zip(&kv[ki..ki + g.out_c]) {
                                    *yv += a * kw;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        self.push(
            "conv2d",
            Tensor::new(vec![g.batch, g.out_h, g.out_w, g.out_c], y)?,
            Op::Conv2d { x, k, b, geom },
            rg,
        )
    }

    /// Group normalization over `[B, ..., C]`; layer norm is the one-group case.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let lay = GroupLayout::new(self.shape(x), groups)?;
        if self.shape(gamma) != [lay.channels] || self.shape(beta) != [lay.channels] {
            return Err(Error::invalid("group norm affine shape must be [C]"));
        }
        let stats = group_stats(self.v(x), &lay, eps);
        let y = group_norm_forward(self.v(x), &lay, self.v(gamma), self.v(beta), &stats);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "group_norm",
            Tensor::new(shape, y)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                lay,
                stats,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let y: Vec<R> = self
            .v(x)
            .iter()
            .map(|&a| if a > R::ZERO { a } else { R::ZERO })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("relu", Tensor::new(shape, y)?, Op::Relu { x }, rg)
    }

    /// Elementwise product of a `[B, H, W, C]` map with a learned `[H, W, C]`
    /// embedding, flattened to `[B, H·W·C]`.
    pub fn spatial_mul(&mut self, x: NodeId, e: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let es = self.shape(e);
        if xs.len() < 2 || &xs[1..] != es {
            return Err(Error::invalid(format!(
                "spatial embedding shape {es:?} does not match feature map {xs:?}"
            )));
        }
        let batch = xs[0];
        let per: usize = es.iter().product();
        let ev = self.v(e);
        let y: Vec<R> = self
            .v(x)
            .chunks(per)
            .flat_map(|row| row.iter().zip(ev).map(|(&a, &w)| a * w))
            .collect();
        let rg = self.rg(x) || self.rg(e);
        self.push(
            "spatial_mul",
            Tensor::new(vec![batch, per], y)?,
            Op::SpatialMul { x, e },
            rg,
        )
    }

    /// Global mean over the spatial axes of `[B, ..., C]`.
    pub fn mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::invalid("mean_pool needs rank >= 2"));
        }
        let batch = xs[0];
        let channels = *xs.last().unwrap();
        let spatial: usize = xs[1..xs.len() - 1].iter().product();
        let xv = self.v(x);
        let mut y = vec![R::ZERO; batch * channels];
        for b in 0..batch {
            for c in 0..channels {
                let mut s = 0.0f64;
                for p in 0..spatial {
                    s += xv[(b * spatial + p) * channels + c].to_f64();
                }
                y[b * channels + c] = R::from_f64(s / spatial as f64);
            }
        }
        let rg = self.rg(x);
        self.push(
            "mean_pool",
            Tensor::new(vec![batch, channels], y)?,
            Op::MeanPool {
                x,
                spatial,
                channels,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", t, Op::Reshape { x }, rg)
    }

    /// Row-wise `v / max(‖v‖₂, eps)` over a `[R, D]` tensor. Gradients pass
    /// through the norm.
    pub fn l2_normalize(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::invalid("l2_normalize expects [rows, dim]"));
        }
        let d = xs[1];
        let mut norms = Vec::with_capacity(xs[0]);
        let mut y = Vec::with_capacity(xs[0] * d);
        for row in self.v(x).chunks(d) {
            let n = row.iter().map(|a| a.to_f64() * a.to_f64()).sum::<f64>().sqrt();
            let denom = n.max(eps);
            y.extend(row.iter().map(|a| R::from_f64(a.to_f64() / denom)));
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(
            "l2_normalize",
            Tensor::new(xs, y)?,
            Op::L2Normalize { x, eps, norms },
            rg,
        )
    }

    /// Picks leading-axis slices by index.
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let n = xs[0];
        let per: usize = xs[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::OutOfRange(format!("row {bad} of {n}")));
        }
        let xv = self.v(x);
        let mut y = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            y.extend_from_slice(&xv[r * per..(r + 1) * per]);
        }
        let mut shape = xs;
        shape[0] = rows.len();
        let rg = self.rg(x);
        self.push(
            "select_rows",
            Tensor::new(shape, y)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    fn row_dims(&self, x: NodeId) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] == 0 {
            return Err(Error::invalid(format!("expected [rows, cols], got {xs:?}")));
        }
        Ok((xs[0], xs[1]))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.row_dims(x)?;
        let mut y = Vec::with_capacity(rows * cols);
        for row in self.v(x).chunks(cols) {
            let lse = lse_slice(row);
            y.extend(row.iter().map(|a| R::from_f64((a.to_f64() - lse).exp())));
        }
        let rg = self.rg(x);
        self.push(
            "softmax",
            Tensor::new(vec![rows, cols], y)?,
            Op::Softmax { x },
            rg,
        )
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.row_dims(x)?;
        let mut y = Vec::with_capacity(rows * cols);
        for row in self.v(x).chunks(cols) {
            let lse = lse_slice(row);
            y.extend(row.iter().map(|a| R::from_f64(a.to_f64() - lse)));
        }
        let rg = self.rg(x);
        self.push(
            "log_softmax",
            Tensor::new(vec![rows, cols], y)?,
            Op::LogSoftmax { x },
            rg,
        )
    }

    /// Row-wise log-sum-exp, `[R, K] -> [R]`.
    pub fn logsumexp(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.row_dims(x)?;
        let y: Vec<R> = self
            .v(x)
            .chunks(cols)
            .map(|row| R::from_f64(lse_slice(row)))
            .collect();
        let rg = self.rg(x);
        self.push(
            "logsumexp",
            Tensor::new(vec![rows], y)?,
            Op::LogSumExp { x },
            rg,
        )
    }

    /// `y[r] = x[r, idx[r]]`.
    pub fn gather_cols(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.row_dims(x)?;
        if idx.len() != rows {
            return Err(Error::invalid("gather_cols needs one index per row"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::OutOfRange(format!("column {bad} of {cols}")));
        }
        let xv = self.v(x);
        let y: Vec<R> = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| xv[r * cols + i])
            .collect();
        let rg = self.rg(x);
        self.push(
            "gather_cols",
            Tensor::new(vec![rows], y)?,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Dot product of each row with a constant vector, `[R, N] -> [R]`.
    pub fn row_dot(&mut self, x: NodeId, v: &[f64]) -> Result<NodeId> {
        let (rows, cols) = self.row_dims(x)?;
        if v.len() != cols {
            return Err(Error::invalid("row_dot vector length mismatch"));
        }
        let y: Vec<R> = self
            .v(x)
            .chunks(cols)
            .map(|row| R::from_f64(row.iter().zip(v).map(|(a, b)| a.to_f64() * b).sum()))
            .collect();
        let rg = self.rg(x);
        self.push(
            "row_dot",
            Tensor::new(vec![rows], y)?,
            Op::RowDot { x, v: v.to_vec() },
            rg,
        )
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "{op} shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(R, R) -> R,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(a, b, name)?;
        let y: Vec<R> = self
            .v(a)
            .iter()
            .zip(self.v(b))
            .map(|(&p, &q)| f(p, q))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Tensor::new(shape, y)?, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("add", a, b, |p, q| p + q, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("sub", a, b, |p, q| p - q, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("mul", a, b, |p, q| p * q, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cr = R::from_f64(c);
        let y: Vec<R> = self.v(x).iter().map(|&a| a * cr).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("scale", Tensor::new(shape, y)?, Op::Scale { x, c }, rg)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let y: Vec<R> = self.v(x).iter().map(|&a| a * a).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("square", Tensor::new(shape, y)?, Op::Square { x }, rg)
    }

    /// Huber penalty, quadratic within `delta` (halved), linear outside.
    pub fn huber(&mut self, x: NodeId, delta: f64) -> Result<NodeId> {
        let y: Vec<R> = self
            .v(x)
            .iter()
            .map(|a| {
                let a = a.to_f64();
                R::from_f64(if a.abs() <= delta {
                    0.5 * a * a
                } else {
                    delta * (a.abs() - 0.5 * delta)
                })
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("huber", Tensor::new(shape, y)?, Op::Huber { x, delta }, rg)
    }

    /// Sum of all elements into a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.v(x).iter().map(|a| a.to_f64()).sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(R::from_f64(s)), Op::Sum { x }, rg)
    }

    /// Mean of all elements into a `[1]` tensor.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a `[1]`-shaped node. Returns gradients for every
    /// trainable parameter (zeros where the loss does not depend on it).
    pub fn backward(&self, loss: NodeId) -> Result<ParamSet<R>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::ONE]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, idx, &gy, &mut grads);
            // keep leaf grads for collection below
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gy);
            }
        }
        let mut out = ParamSet::new();
        for (name, id) in &self.params {
            if !self.nodes[id.0].requires_grad {
                continue;
            }
            let shape = self.shape(*id).to_vec();
            let g = match grads[id.0].take() {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(&shape),
            };
            if !g.all_finite() {
                return Err(Error::NumericOverflow { op: "backward" });
            }
            out.insert(name.clone(), g)?;
        }
        Ok(out)
    }

    fn acc<'a>(
        &self,
        grads: &'a mut [Option<Vec<R>>],
        id: NodeId,
    ) -> Option<&'a mut Vec<R>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![R::ZERO; len]))
    }

    fn propagate(&self, op: &Op, idx: usize, gy: &[R], grads: &mut [Option<Vec<R>>]) {
        let yv = self.nodes[idx].value.data();
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (rows, inp) = (xs[0], xs[1]);
                let out = self.shape(*w)[1];
                let xv = self.v(*x);
                let wv = self.v(*w);
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..rows {
                        for (g, &d) in gb.iter_mut().zip(&gy[r * out..(r + 1) * out]) {
                            *g += d;
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for r in 0..rows {
                        let dy = &gy[r * out..(r + 1) * out];
                        for i in 0..inp {
                            let a = xv[r * inp + i];
                            if a == R::ZERO {
                                continue;
                            }
                            for (g, &d) in gw[i * out..(i + 1) * out].iter_mut().zip(dy) {
                                *g += a * d;
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let dy = &gy[r * out..(r + 1) * out];
                        for i in 0..inp {
                            let mut s = R::ZERO;
                            for (&wv_, &d) in wv[i * out..(i + 1) * out].iter().zip(dy) {
                                s += wv_ * d;
                            }
                            gx[r * inp + i] += s;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, geom: g } => {
                let xv = self.v(*x);
                let kv = self.v(*k);
                if let Some(gb) = self.acc(grads, *b) {
                    for chunk in gy.chunks(g.out_c) {
                        for (a, &d) in gb.iter_mut().zip(chunk) {
                            *a += d;
                        }
                    }
                }
                let want_k = self.rg(*k);
                let want_x = self.rg(*x);
                let mut gk = if want_k {
                    grads[k.0].take().unwrap_or_else(|| vec![R::ZERO; kv.len()])
                } else {
                    Vec::new()
                };
                let mut gx = if want_x {
                    grads[x.0].take().unwrap_or_else(|| vec![R::ZERO; xv.len()])
                } else {
                    Vec::new()
                };
                for n in 0..g.batch {
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            let o = ((n * g.out_h + oy) * g.out_w + ox) * g.out_c;
                            let dy = &gy[o..o + g.out_c];
                            for ky in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                if iy < 0 || iy >= g.in_h as isize {
                                    continue;
                                }
                                for kx in 0..g.kernel {
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if ix < 0 || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xi = ((n * g.in_h + iy as usize) * g.in_w + ix as usize)
                                        * g.in_c;
                                    for ci in 0..g.in_c {
                                        let ki = ((ky * g.kernel + kx) * g.in_c + ci) * g.out_c;
                                        let krow = &kv[ki..ki + g.out_c];
                                        if want_k {
                                            let a = xv[xi + ci];
                                            if a != R::ZERO {
                                                for (gkv, &d) in
                                                    gk[ki..ki + g.out_c].iter_mut().zip(dy)
                                                {
                                                    *gkv += a * d;
                                                }
                                            }
                                        }
                                        if want_x {
                                            let mut s = R::ZERO;
                                            for (&kw, &d) in krow.iter().zip(dy) {
                                                s += kw * d;
                                            }
                                            gx[xi + ci] += s;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_k {
                    grads[k.0] = Some(gk);
                }
                if want_x {
                    grads[x.0] = Some(gx);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                lay,
                stats,
            } => {
                let xv = self.v(*x);
                let gam = self.v(*gamma);
                let cpg = lay.per_group();
                let xhat = |b: usize, off: usize, c: usize| {
                    let (mean, rstd) = stats[b * lay.groups + c / cpg];
                    (xv[off + c].to_f64() - mean) * rstd
                };
                if let Some(gb) = self.acc(grads, *beta) {
                    for chunk in gy.chunks(lay.channels) {
                        for (a, &d) in gb.iter_mut().zip(chunk) {
                            *a += d;
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for b in 0..lay.batch {
                        for s in 0..lay.spatial {
                            let off = (b * lay.spatial + s) * lay.channels;
                            for c in 0..lay.channels {
                                gg[c] += R::from_f64(gy[off + c].to_f64() * xhat(b, off, c));
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let m = lay.count() as f64;
                    for b in 0..lay.batch {
                        for grp in 0..lay.groups {
                            let (_, rstd) = stats[b * lay.groups + grp];
                            let mut sum_d = 0.0f64;
                            let mut sum_dx = 0.0f64;
                            for s in 0..lay.spatial {
                                let off = (b * lay.spatial + s) * lay.channels;
                                for c in grp * cpg..(grp + 1) * cpg {
                                    let d = gy[off + c].to_f64() * gam[c].to_f64();
                                    sum_d += d;
                                    sum_dx += d * xhat(b, off, c);
                                }
                            }
                            for s in 0..lay.spatial {
                                let off = (b * lay.spatial + s) * lay.channels;
                                for c in grp * cpg..(grp + 1) * cpg {
                                    let d = gy[off + c].to_f64() * gam[c].to_f64();
                                    let v = rstd / m * (m * d - sum_d - xhat(b, off, c) * sum_dx);
                                    gx[off + c] += R::from_f64(v);
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.v(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((g, &a), &d) in gx.iter_mut().zip(xv).zip(gy) {
                        if a > R::ZERO {
                            *g += d;
                        }
                    }
                }
            }
            Op::SpatialMul { x, e } => {
                let per = self.value(*e).len();
                let xv = self.v(*x);
                let ev = self.v(*e);
                if let Some(ge) = self.acc(grads, *e) {
                    for (xr, dr) in xv.chunks(per).zip(gy.chunks(per)) {
                        for ((g, &a), &d) in ge.iter_mut().zip(xr).zip(dr) {
                            *g += a * d;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (gr, dr) in gx.chunks_mut(per).zip(gy.chunks(per)) {
                        for ((g, &w), &d) in gr.iter_mut().zip(ev).zip(dr) {
                            *g += w * d;
                        }
                    }
                }
            }
            Op::MeanPool {
                x,
                spatial,
                channels,
            } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let inv = R::from_f64(1.0 / *spatial as f64);
                    let batch = gy.len() / channels;
                    for b in 0..batch {
                        for p in 0..*spatial {
                            for c in 0..*channels {
                                gx[(b * spatial + p) * channels + c] += gy[b * channels + c] * inv;
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (g, &d) in gx.iter_mut().zip(gy) {
                        *g += d;
                    }
                }
            }
            Op::L2Normalize { x, eps, norms } => {
                let d = self.shape(*x)[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &yv[r * d..(r + 1) * d];
                        let dr = &gy[r * d..(r + 1) * d];
                        let gr = &mut gx[r * d..(r + 1) * d];
                        if n >= *eps {
                            let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                            for ((g, &yy), &dd) in gr.iter_mut().zip(yr).zip(dr) {
                                *g += R::from_f64((dd.to_f64() - yy.to_f64() * dot) / n);
                            }
                        } else {
                            for (g, &dd) in gr.iter_mut().zip(dr) {
                                *g += R::from_f64(dd.to_f64() / eps);
                            }
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let per: usize = self.shape(*x)[1..].iter().product();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (g, &d) in gx[r * per..(r + 1) * per]
                            .iter_mut()
                            .zip(&gy[i * per..(i + 1) * per])
                        {
                            *g += d;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let cols = self.shape(*x)[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, yr), dr) in gx
                        .chunks_mut(cols)
                        .zip(yv.chunks(cols))
                        .zip(gy.chunks(cols))
                    {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        for ((g, &p), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += R::from_f64(p.to_f64() * (d.to_f64() - dot));
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let cols = self.shape(*x)[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, yr), dr) in gx
                        .chunks_mut(cols)
                        .zip(yv.chunks(cols))
                        .zip(gy.chunks(cols))
                    {
                        let total: f64 = dr.iter().map(|d| d.to_f64()).sum();
                        for ((g, &ls), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += R::from_f64(d.to_f64() - ls.to_f64().exp() * total);
                        }
                    }
                }
            }
            Op::LogSumExp { x } => {
                let cols = self.shape(*x)[1];
                let xv = self.v(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (gr, xr)) in gx.chunks_mut(cols).zip(xv.chunks(cols)).enumerate() {
                        let lse = yv[r].to_f64();
                        let d = gy[r].to_f64();
                        for (g, &a) in gr.iter_mut().zip(xr) {
                            *g += R::from_f64(d * (a.to_f64() - lse).exp());
                        }
                    }
                }
            }
            Op::GatherCols { x, idx } => {
                let cols = self.shape(*x)[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * cols + i] += gy[r];
                    }
                }
            }
            Op::RowDot { x, v } => {
                let cols = v.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for (gr, &d) in gx.chunks_mut(cols).zip(gy) {
                        for (g, &c) in gr.iter_mut().zip(v) {
                            *g += R::from_f64(d.to_f64() * c);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if let Some(g) = self.acc(grads, id) {
                        for (s, &d) in g.iter_mut().zip(gy) {
                            *s += d;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(g) = self.acc(grads, *a) {
                    for (s, &d) in g.iter_mut().zip(gy) {
                        *s += d;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for (s, &d) in g.iter_mut().zip(gy) {
                        *s -= d;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.v(*a), self.v(*b));
                if let Some(g) = self.acc(grads, *a) {
                    for ((s, &d), &o) in g.iter_mut().zip(gy).zip(bv) {
                        *s += d * o;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for ((s, &d), &o) in g.iter_mut().zip(gy).zip(av) {
                        *s += d * o;
                    }
                }
            }
            Op::Scale { x, c } => {
                let cr = R::from_f64(*c);
                if let Some(g) = self.acc(grads, *x) {
                    for (s, &d) in g.iter_mut().zip(gy) {
                        *s += d * cr;
                    }
                }
            }
            Op::Square { x } => {
                let xv = self.v(*x);
                if let Some(g) = self.acc(grads, *x) {
                    for ((s, &d), &a) in g.iter_mut().zip(gy).zip(xv) {
                        *s += d * a * R::from_f64(2.0);
                    }
                }
            }
            Op::Huber { x, delta } => {
                let xv = self.v(*x);
                if let Some(g) = self.acc(grads, *x) {
                    for ((s, &d), &a) in g.iter_mut().zip(gy).zip(xv) {
                        let a = a.to_f64();
                        let slope = if a.abs() <= *delta { a } else { delta * a.signum() };
                        *s += R::from_f64(d.to_f64() * slope);
                    }
                }
            }
            Op::Sum { x } => {
                let d = gy[0];
                if let Some(g) = self.acc(grads, *x) {
                    for s in g.iter_mut() {
                        *s += d;
                    }
                }
            }
        }
    }
}

/// Builds a graph over `params` with `build`, then differentiates the
/// returned scalar. `frozen` parameters are bound as constants.
pub fn forward_backward<R, F>(
    params: &ParamSet<R>,
    frozen: Option<&ParamSet<R>>,
    build: F,
) -> Result<(f64, ParamSet<R>)>
where
    R: Real,
    F: FnOnce(&mut Graph<R>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    g.bind_params(params, true)?;
    if let Some(f) = frozen {
        g.bind_params(f, false)?;
    }
    let loss = build(&mut g)?;
    let value = g.value(loss).data()[0].to_f64();
    let grads = g.backward(loss)?;
    Ok((value, grads))
}
