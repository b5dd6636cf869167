//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its value and enough saved state
//! for its backward rule. Node ids are assigned in execution order, so
//! walking the tape from the loss down to id 0 visits nodes in reverse
//! topological order, each exactly once.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry, Padding};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities inside [`Var::bce`].
pub const BCE_CLAMP: f64 = 1e-7;

/// A fixed linear map `R^n -> R^m` with a known adjoint.
///
/// Used to generate convolution kernels from basis coefficients: the map is
/// recorded on the tape and its adjoint carries kernel gradients back to
/// the coefficients.
pub trait LinearMap {
    fn input_len(&self) -> usize;
    fn output_shape(&self) -> Vec<usize>;
    /// Overwrites `out` with `A * input`.
    fn apply(&self, input: &[f64], out: &mut [f64]);
    /// Accumulates `A^T * grad_out` into `grad_in`.
    fn adjoint(&self, grad_out: &[f64], grad_in: &mut [f64]);
}

/// Per-channel statistics layout `[outer, channels, inner]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl ChannelLayout {
    pub fn len(&self) -> usize {
        self.outer * self.channels * self.inner
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Relu(usize),
    Sigmoid(usize),
    Reshape(usize),
    Narrow { input: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    MaxPool2 { input: usize, argmax: Vec<usize> },
    Upsample2(usize),
    Conv2d { x: usize, k: usize, geom: ConvGeometry },
    ChannelBias { x: usize, bias: usize, layout: ChannelLayout },
    BatchNorm(Box<BatchNormSaved>),
    GroupMax { input: usize, argmax: Vec<usize> },
    Linear { input: usize, map: Rc<dyn LinearMap> },
    Bce { p: usize, target: Rc<Tensor>, scale: f64 },
}

struct BatchNormSaved {
    x: usize,
    gamma: usize,
    beta: usize,
    layout: ChannelLayout,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let seed_len = nodes[loss.id].value.len();
        if seed_len != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(nodes.len(), || None);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |target: usize, delta: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (a, d) in existing.iter_mut().zip(delta) {
                            *a += d;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            };
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                    acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
                Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
                Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
                Op::Relu(a) => {
                    let x = val(*a).data();
                    acc(*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                Op::Reshape(a) => acc(*a, g),
                Op::Narrow { input, axis, start } => {
                    let src = val(*input).shape();
                    let outer: usize = src[..*axis].iter().product();
                    let inner: usize = src[*axis + 1..].iter().product();
                    let n = src[*axis];
                    let len = node.value.shape()[*axis];
                    let mut full = vec![0.0; val(*input).len()];
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let s = o * len * inner;
                        full[dst..dst + len * inner].copy_from_slice(&g[s..s + len * inner]);
                    }
                    acc(*input, full);
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = node.value.shape();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let total = out_shape[*axis];
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = val(inp).shape()[*axis];
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            part.extend_from_slice(&g[s..s + len * inner]);
                        }
                        offset += len;
                        acc(inp, part);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut full = vec![0.0; val(*input).len()];
                    for (gv, &src) in g.iter().zip(argmax) {
                        full[src] += gv;
                    }
                    acc(*input, full);
                }
                Op::Upsample2(a) => {
                    let src = val(*a).shape();
                    let nd = src.len();
                    let (h, w) = (src[nd - 2], src[nd - 1]);
                    let planes = val(*a).len() / (h * w);
                    let mut full = vec![0.0; val(*a).len()];
                    for p in 0..planes {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                full[(p * h + y / 2) * w + x / 2] += g[(p * 2 * h + y) * 2 * w + x];
                            }
                        }
                    }
                    acc(*a, full);
                }
                Op::Conv2d { x, k, geom } => {
                    let want_x = nodes[*x].requires_grad;
                    let want_k = nodes[*k].requires_grad;
                    let (gx, gk) =
                        conv2d_backward(geom, val(*x).data(), val(*k).data(), &g, want_x, want_k);
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    if let Some(gk) = gk {
                        acc(*k, gk);
                    }
                }
                Op::ChannelBias { x, bias, layout } => {
                    let mut gb = vec![0.0; layout.channels];
                    for o in 0..layout.outer {
                        for c in 0..layout.channels {
                            let base = (o * layout.channels + c) * layout.inner;
                            gb[c] += g[base..base + layout.inner].iter().sum::<f64>();
                        }
                    }
                    acc(*bias, gb);
                    acc(*x, g);
                }
                Op::BatchNorm(s) => {
                    let l = s.layout;
                    let gamma = val(s.gamma).data();
                    let m = (l.outer * l.inner) as f64;
                    let mut sum_g = vec![0.0; l.channels];
                    let mut sum_gx = vec![0.0; l.channels];
                    for o in 0..l.outer {
                        for c in 0..l.channels {
                            let base = (o * l.channels + c) * l.inner;
                            for i in base..base + l.inner {
                                sum_g[c] += g[i];
                                sum_gx[c] += g[i] * s.xhat[i];
                            }
                        }
                    }
                    if nodes[s.x].requires_grad {
                        let mut gx = vec![0.0; g.len()];
                        for o in 0..l.outer {
                            for c in 0..l.channels {
                                let base = (o * l.channels + c) * l.inner;
                                let k = gamma[c] * s.inv_std[c];
                                for i in base..base + l.inner {
                                    gx[i] = if s.batch_stats {
                                        k * (g[i] - sum_g[c] / m - s.xhat[i] * sum_gx[c] / m)
                                    } else {
                                        k * g[i]
                                    };
                                }
                            }
                        }
                        acc(s.x, gx);
                    }
                    acc(s.gamma, sum_gx);
                    acc(s.beta, sum_g);
                }
                Op::GroupMax { input, argmax } => {
                    let mut full = vec![0.0; val(*input).len()];
                    for (gv, &src) in g.iter().zip(argmax) {
                        full[src] += gv;
                    }
                    acc(*input, full);
                }
                Op::Linear { input, map } => {
                    let mut gi = vec![0.0; map.input_len()];
                    map.adjoint(&g, &mut gi);
                    acc(*input, gi);
                }
                Op::Bce { p, target, scale } => {
                    let pv = val(*p).data();
                    let gp = pv
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &y)| {
                            if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                g[0] * scale * (-y / p + (1.0 - y) / (1.0 - p))
                            }
                        })
                        .collect();
                    acc(*p, gp);
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Gradients of tracked leaves after [`Tape::backward`].
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the leaf did not influence the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros shaped like the leaf when it was unused.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::new(a.shape().to_vec(), data)?, Op::Add(self.id, other.id), rg))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::new(a.shape().to_vec(), data)?, Op::Mul(self.id, other.id), rg))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value().narrow(axis, start, len)?;
        Ok(self.unary(v, Op::Narrow { input: self.id, axis, start }))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat(&refs, axis)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        let inputs = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(v, Op::Concat { inputs, axis }, rg))
    }

    /// 2x2 max pooling with stride 2 over the last two axes; ties go to the
    /// first element in row-major window order.
    pub fn maxpool2x2(&self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        let nd = s.len();
        if nd < 2 || s[nd - 2] < 2 || s[nd - 1] < 2 {
            return Err(Error::shape(format!("maxpool2x2 on {s:?}")));
        }
        let (h, w) = (s[nd - 2], s[nd - 1]);
        let (ho, wo) = (h / 2, w / 2);
        let planes = x.len() / (h * w);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        let d = x.data();
        for p in 0..planes {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = (p * h + 2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (p * h + 2 * y + dy) * w + 2 * xx + dx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = s.to_vec();
        shape[nd - 2] = ho;
        shape[nd - 1] = wo;
        Ok(self.unary(Tensor::new(shape, out)?, Op::MaxPool2 { input: self.id, argmax }))
    }

    /// Nearest-neighbour 2x upsampling over the last two axes.
    pub fn upsample2x(&self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        let nd = s.len();
        if nd < 2 {
            return Err(Error::shape(format!("upsample2x on {s:?}")));
        }
        let (h, w) = (s[nd - 2], s[nd - 1]);
        let planes = x.len() / (h * w).max(1);
        let d = x.data();
        let mut out = Vec::with_capacity(x.len() * 4);
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.push(d[(p * h + y / 2) * w + xx / 2]);
                }
            }
        }
        let mut shape = s.to_vec();
        shape[nd - 2] = 2 * h;
        shape[nd - 1] = 2 * w;
        Ok(self.unary(Tensor::new(shape, out)?, Op::Upsample2(self.id)))
    }

    /// Cross-correlation of `[B, C_in, H, W]` with `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&self, kernel: Var<'t>, stride: usize, pad: Padding) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        let geom = ConvGeometry::new(x.shape(), k.shape(), stride, pad)?;
        let out = conv2d_forward(&geom, x.data(), k.data());
        let v = Tensor::new(geom.output_shape().to_vec(), out)?;
        let rg = self.requires_grad() || kernel.requires_grad();
        Ok(self.tape.push(v, Op::Conv2d { x: self.id, k: kernel.id, geom }, rg))
    }

    /// Adds `bias[c]` to every element of channel `c` in the given layout.
    pub fn channel_bias(&self, bias: Var<'t>, layout: ChannelLayout) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        if x.len() != layout.len() || b.len() != layout.channels {
            return Err(Error::shape(format!(
                "channel_bias: input {:?}, bias {:?}, layout {layout:?}",
                x.shape(),
                b.shape()
            )));
        }
        let mut out = x.data().to_vec();
        for o in 0..layout.outer {
            for c in 0..layout.channels {
                let base = (o * layout.channels + c) * layout.inner;
                for v in &mut out[base..base + layout.inner] {
                    *v += b.data()[c];
                }
            }
        }
        let rg = self.requires_grad() || bias.requires_grad();
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.push(v, Op::ChannelBias { x: self.id, bias: bias.id, layout }, rg))
    }

    /// Per-channel normalisation with affine `gamma`/`beta`.
    ///
    /// With `running = None` the statistics are computed over `outer` and
    /// `inner` (training mode) and returned; otherwise the given mean and
    /// variance are used as constants.
    pub fn batch_norm(
        &self,
        gamma: Var<'t>,
        beta: Var<'t>,
        layout: ChannelLayout,
        running: Option<&BatchStats>,
        eps: f64,
    ) -> Result<(Var<'t>, BatchStats)> {
        let x = self.value();
        let (g, b) = (gamma.value(), beta.value());
        if x.len() != layout.len() || g.len() != layout.channels || b.len() != layout.channels {
            return Err(Error::shape(format!(
                "batch_norm: input {:?}, layout {layout:?}",
                x.shape()
            )));
        }
        let d = x.data();
        let stats = match running {
            Some(s) => s.clone(),
            None => {
                let m = (layout.outer * layout.inner) as f64;
                let mut mean = vec![0.0; layout.channels];
                let mut var = vec![0.0; layout.channels];
                for o in 0..layout.outer {
                    for (c, mc) in mean.iter_mut().enumerate() {
                        let base = (o * layout.channels + c) * layout.inner;
                        *mc += d[base..base + layout.inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for o in 0..layout.outer {
                    for c in 0..layout.channels {
                        let base = (o * layout.channels + c) * layout.inner;
                        var[c] += d[base..base + layout.inner]
                            .iter()
                            .map(|v| (v - mean[c]) * (v - mean[c]))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                BatchStats { mean, var }
            }
        };
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for o in 0..layout.outer {
            for c in 0..layout.channels {
                let base = (o * layout.channels + c) * layout.inner;
                for i in base..base + layout.inner {
                    xhat[i] = (d[i] - stats.mean[c]) * inv_std[c];
                    out[i] = g.data()[c] * xhat[i] + b.data()[c];
                }
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let saved = BatchNormSaved {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            layout,
            xhat,
            inv_std,
            batch_stats: running.is_none(),
        };
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok((self.tape.push(v, Op::BatchNorm(Box::new(saved)), rg), stats))
    }

    /// Maximum over the scale and rotation axes of `[B, S, P, R, H, W]`,
    /// giving `[B, P, H, W]`. Ties go to the lowest `(s, r)` index.
    pub fn group_max(&self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 6 {
            return Err(Error::shape(format!("group_max expects [B,S,P,R,H,W], got {s:?}")));
        }
        let (bn, sn, pn, rn, hw) = (s[0], s[1], s[2], s[3], s[4] * s[5]);
        let d = x.data();
        let mut out = Vec::with_capacity(bn * pn * hw);
        let mut argmax = Vec::with_capacity(bn * pn * hw);
        for b in 0..bn {
            for p in 0..pn {
                for q in 0..hw {
                    let mut best = usize::MAX;
                    for sc in 0..sn {
                        for r in 0..rn {
                            let i = ((((b * sn + sc) * pn + p) * rn) + r) * hw + q;
                            if best == usize::MAX || d[i] > d[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(vec![bn, pn, s[4], s[5]], out)?;
        Ok(self.unary(v, Op::GroupMax { input: self.id, argmax }))
    }

    pub fn linear(&self, map: Rc<dyn LinearMap>) -> Result<Var<'t>> {
        let x = self.value();
        if x.len() != map.input_len() {
            return Err(Error::shape(format!(
                "linear map expects {} inputs, got {}",
                map.input_len(),
                x.len()
            )));
        }
        let shape = map.output_shape();
        let mut out = vec![0.0; shape.iter().product()];
        map.apply(x.data(), &mut out);
        let v = Tensor::new(shape, out)?;
        Ok(self.unary(v, Op::Linear { input: self.id, map }))
    }

    /// Binary cross-entropy summed over all elements and divided by `batch`.
    pub fn bce(&self, target: &Tensor, batch: usize) -> Result<Var<'t>> {
        let p = self.value();
        same_shape(&p, target, "bce")?;
        if batch == 0 {
            return Err(Error::invalid("bce batch size must be positive"));
        }
        let scale = 1.0 / batch as f64;
        let loss: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| bce_term(p, y))
            .sum::<f64>()
            * scale;
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::Bce { p: self.id, target: Rc::new(target.clone()), scale },
        ))
    }
}

/// `-y ln p - (1-y) ln(1-p)` with `p` clamped to `[BCE_CLAMP, 1-BCE_CLAMP]`.
pub fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[-1.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 2.0]);
        let z = tape.param(t(&[1], &[0.0]));
        assert_eq!(z.sigmoid().value().item(), 0.5);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let tape = Tape::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = x.maxpool2x2().unwrap();
        assert_eq!(y.value().data(), &[4.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[5.0, 5.0, 5.0, 5.0]));
        let y = x.maxpool2x2().unwrap();
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bce_examples() {
        let tape = Tape::new();
        let p = tape.param(t(&[1], &[0.5]));
        let l = p.bce(&t(&[1], &[1.0]), 1).unwrap();
        assert!((l.value().item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_term(1e-12, 0.0) < 1e-6);
        assert!(bce_term(0.0, 0.0).is_finite());
        assert!(bce_term(1.0, 0.0).is_finite());
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x.relu()).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let g = tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn group_max_shape_and_routing() {
        let tape = Tape::new();
        // [B=1, S=2, P=1, R=2, H=1, W=1]
        let x = tape.param(t(&[1, 2, 1, 2, 1, 1], &[0.1, 0.7, 0.3, 0.2]));
        let y = x.group_max().unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.value().item(), 0.7);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
