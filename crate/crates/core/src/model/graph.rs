//! Small define-by-run reverse-mode graph over dynamic-rank f64 arrays.
//!
//! Each forward call appends a node; `backward` walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because
//! inputs always precede their consumers. Gradients are only materialized
//! along paths that reach a trainable leaf.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Axis, Ix2, Ix4, IxDyn};

use crate::exec::Exec;

use super::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// scale * x + shift, elementwise; only the scale matters in reverse.
    Affine { x: NodeId, scale: f64 },
    LeakyRelu { x: NodeId, slope: f64 },
    Tanh(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Upsample2x(NodeId),
    AvgPool2x(NodeId),
    /// Per-channel normalization over (batch, height, width) with
    /// population statistics.
    ChannelNorm { x: NodeId, eps: f64 },
    ConcatChannels(Vec<NodeId>),
    Reshape(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Upsample2x(_) => "upsample2x",
            Op::AvgPool2x(_) => "avg_pool2x",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::ConcatChannels(_) => "concat_channels",
            Op::Reshape(_) => "reshape",
            Op::MeanAll(_) => "mean_all",
            Op::SumAll(_) => "sum_all",
        }
    }
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Graph {
    pub fn new(exec: Exec) -> Graph {
        Graph {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Count of each op kind in the graph; used by structural assertions.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for n in &self.nodes {
            *counts.entry(n.op.name()).or_insert(0) += 1;
        }
        counts
    }

    // ---- node constructors -------------------------------------------

    pub fn leaf(&mut self, value: ArrayD<f64>, trainable: bool) -> NodeId {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| scale * t + shift);
        let ng = self.needs(x);
        self.push(v, Op::Affine { x, scale }, ng)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| if t > 0.0 { t } else { slope * t });
        let ng = self.needs(x);
        self.push(v, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(f64::tanh);
        let ng = self.needs(x);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(f64::exp);
        let ng = self.needs(x);
        self.push(v, Op::Exp(x), ng)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| t * t);
        let ng = self.needs(x);
        self.push(v, Op::Square(x), ng)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(f64::abs);
        let ng = self.needs(x);
        self.push(v, Op::Abs(x), ng)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("conv2d x rank");
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().expect("conv2d w rank");
        let bv = self.nodes[b.0].value.as_slice().expect("conv2d bias layout").to_vec();
        let out = ops::conv2d_forward(&xv, &wv, &bv, stride, pad, self.exec);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().expect("linear x rank");
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().expect("linear w rank");
        let bv = self.nodes[b.0].value.as_slice().expect("linear bias layout").to_vec();
        let out = ops::linear_forward(&xv.to_owned(), &wv.to_owned(), &bv);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out.into_dyn(), Op::Linear { x, w, b }, ng)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("upsample rank");
        let out = ops::upsample2x_forward(&xv, self.exec);
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::Upsample2x(x), ng)
    }

    pub fn avg_pool2x(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().expect("pool rank");
        let out = ops::avgpool2x_forward(&xv, self.exec);
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::AvgPool2x(x), ng)
    }

    pub fn channel_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let (mean, istd) = self.channel_stats(x, eps);
        let xv = &self.nodes[x.0].value;
        let c = xv.shape()[1];
        let mut out = xv.clone();
        for ci in 0..c {
            let (m, s) = (mean[ci], istd[ci]);
            out.index_axis_mut(Axis(1), ci).mapv_inplace(|t| (t - m) * s);
        }
        let ng = self.needs(x);
        self.push(out, Op::ChannelNorm { x, eps }, ng)
    }

    fn channel_stats(&self, x: NodeId, eps: f64) -> (Vec<f64>, Vec<f64>) {
        let xv = &self.nodes[x.0].value;
        let c = xv.shape()[1];
        let mut mean = Vec::with_capacity(c);
        let mut istd = Vec::with_capacity(c);
        for ci in 0..c {
            let lane = xv.index_axis(Axis(1), ci);
            let m = lane.iter().sum::<f64>() / lane.len() as f64;
            let var = lane.iter().map(|&t| (t - m) * (t - m)).sum::<f64>() / lane.len() as f64;
            mean.push(m);
            istd.push(1.0 / (var + eps).sqrt());
        }
        (mean, istd)
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatChannels(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        let ng = self.needs(x);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(x);
        self.push(ArrayD::from_elem(IxDyn(&[1]), m), Op::MeanAll(x), ng)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>();
        let ng = self.needs(x);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::SumAll(x), ng)
    }

    /// Mean of a list of `[1]`-shaped scalars.
    pub fn mean_of(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        self.affine(acc, 1.0 / parts.len() as f64, 0.0)
    }

    // ---- reverse pass --------------------------------------------------

    fn accumulate(&mut self, id: NodeId, delta: ArrayD<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Backpropagate from a scalar loss node. Gradients land on every node
    /// with `needs_grad`, in particular on trainable leaves.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].needs_grad {
            return;
        }
        self.nodes[loss.0].grad = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad.mapv(|t| -t));
                }
                Op::Mul(a, b) => {
                    let da = &grad * &self.nodes[b.0].value;
                    let db = &grad * &self.nodes[a.0].value;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Affine { x, scale, .. } => {
                    self.accumulate(x, grad.mapv(|t| t * scale));
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = grad;
                    ndarray::Zip::from(&mut dx).and(xv).for_each(|g, &t| {
                        if t <= 0.0 {
                            *g *= slope;
                        }
                    });
                    self.accumulate(x, dx);
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    let dx = &grad * &y.mapv(|t| 1.0 - t * t);
                    self.accumulate(x, dx);
                }
                Op::Exp(x) => {
                    let y = &self.nodes[i].value;
                    self.accumulate(x, &grad * y);
                }
                Op::Square(x) => {
                    let xv = &self.nodes[x.0].value;
                    self.accumulate(x, &grad * &xv.mapv(|t| 2.0 * t));
                }
                Op::Abs(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = &grad * &xv.mapv(|t| if t > 0.0 { 1.0 } else if t < 0.0 { -1.0 } else { 0.0 });
                    self.accumulate(x, dx);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                    let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
                    let dout = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dw, db) = ops::conv2d_backward(&xv, &wv, &dout, stride, pad, self.exec);
                    self.accumulate(x, dx.into_dyn());
                    self.accumulate(w, dw.into_dyn());
                    self.accumulate(b, db.into_dyn());
                }
                Op::Linear { x, w, b } => {
                    let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let dout = grad.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let (dx, dw, db) = ops::linear_backward(&xv, &wv, &dout);
                    self.accumulate(x, dx.into_dyn());
                    self.accumulate(w, dw.into_dyn());
                    self.accumulate(b, db.into_dyn());
                }
                Op::Upsample2x(x) => {
                    let dout = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let dx = ops::upsample2x_backward(&dout, self.exec);
                    self.accumulate(x, dx.into_dyn());
                }
                Op::AvgPool2x(x) => {
                    let dout = grad.view().into_dimensionality::<Ix4>().unwrap();
                    let dx = ops::avgpool2x_backward(&dout, self.exec);
                    self.accumulate(x, dx.into_dyn());
                }
                Op::ChannelNorm { x, eps } => {
                    // dL/dx = istd/m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
                    let (mean, istd) = self.channel_stats(x, eps);
                    let xv = &self.nodes[x.0].value;
                    let c = xv.shape()[1];
                    let mut dx = xv.clone();
                    for ci in 0..c {
                        let lane_x = xv.index_axis(Axis(1), ci);
                        let lane_dy = grad.index_axis(Axis(1), ci);
                        let m = lane_x.len() as f64;
                        let (mu, s) = (mean[ci], istd[ci]);
                        let sum_dy: f64 = lane_dy.iter().sum();
                        let sum_dy_xhat: f64 = lane_dy
                            .iter()
                            .zip(lane_x.iter())
                            .map(|(&dy, &t)| dy * (t - mu) * s)
                            .sum();
                        let mut lane_dx = dx.index_axis_mut(Axis(1), ci);
                        ndarray::Zip::from(&mut lane_dx)
                            .and(&lane_dy)
                            .and(&lane_x)
                            .for_each(|d, &dy, &t| {
                                let xhat = (t - mu) * s;
                                *d = s / m * (m * dy - sum_dy - xhat * sum_dy_xhat);
                            });
                    }
                    self.accumulate(x, dx);
                }
                Op::ConcatChannels(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let width = self.nodes[p.0].value.shape()[1];
                        let slice = grad
                            .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + width))
                            .to_owned();
                        self.accumulate(p, slice);
                        offset += width;
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let dx = grad.into_shape_with_order(IxDyn(&shape)).expect("reshape grad");
                    self.accumulate(x, dx);
                }
                Op::MeanAll(x) => {
                    let g = grad.iter().next().copied().unwrap();
                    let n = self.nodes[x.0].value.len() as f64;
                    let shape = self.nodes[x.0].value.raw_dim();
                    self.accumulate(x, ArrayD::from_elem(shape, g / n));
                }
                Op::SumAll(x) => {
                    let g = grad.iter().next().copied().unwrap();
                    let shape = self.nodes[x.0].value.raw_dim();
                    self.accumulate(x, ArrayD::from_elem(shape, g));
                }
            }
        }
    }
}
