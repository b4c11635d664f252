//! Reverse-mode autodiff over a linear tape of operation records.
//!
//! A `Tape` is built per training step: leaves hold parameter snapshots and
//! batch data, every operation appends a node, and `backward` replays the
//! records in reverse insertion order (which is a reverse topological order,
//! since an op can only reference earlier nodes). Backward consumes the op
//! records; leaf gradients survive for the optimizer to read.

use std::rc::Rc;

use super::array::{Array, Scalar};
use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};

/// Handle to a node in its owning tape. Unique per tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Neg(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Atan2 { y: NodeId, x: NodeId },
    Sum(NodeId),
    Mean(NodeId),
    MaxAll(NodeId, usize),
    Reshape(NodeId),
    ConcatCh(Vec<NodeId>),
    SliceCh { input: NodeId, start: usize, len: usize },
    Matmul(NodeId, NodeId),
    Conv2d { input: NodeId, weight: NodeId, groups: usize, stride: usize, padding: usize },
    MaxPool { input: NodeId, indices: Rc<Vec<u32>> },
    Gather { input: NodeId, indices: Rc<Vec<u32>> },
    ChannelMul(NodeId, NodeId),
    ChannelAdd(NodeId, NodeId),
    ChannelMean(NodeId),
    SpatialMean(NodeId),
    LogSoftmax(NodeId),
    NllMean { logp: NodeId, labels: Vec<u16> },
}

struct Node<T> {
    value: Array<T>,
    grad: Option<Array<T>>,
    needs_grad: bool,
    op: Op,
}

/// How the right operand of a binary elementwise op lines up with the left.
/// Only exact match or broadcast over the leading (batch) axis is allowed.
enum Align {
    Same,
    BatchRhs,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Array<T>, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a leaf. Parameters and inputs under test pass `needs_grad = true`;
    /// batch data and constants pass `false` so backward prunes them.
    pub fn leaf(&mut self, value: Array<T>, needs_grad: bool) -> NodeId {
        self.push(value, needs_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array<T>) -> NodeId {
        self.leaf(value, false)
    }

    // ---- binary elementwise -------------------------------------------------

    fn align(&self, op: &str, a: NodeId, b: NodeId) -> Result<Align> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Align::Same)
        } else if sa.len() >= 2 && &sa[1..] == sb {
            Ok(Align::BatchRhs)
        } else {
            Err(Error::dimension(
                op,
                format!("lhs shape {:?} incompatible with rhs shape {:?} (equal shapes or rhs == lhs minus batch axis required)", sa, sb),
            ))
        }
    }

    fn binary(&mut self, op_name: &str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, rec: impl Fn(NodeId, NodeId) -> Op) -> Result<NodeId> {
        self.align(op_name, a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let inner = vb.numel();
        let data: Vec<T> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % inner]))
            .collect();
        let value = Array::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, rec(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    // ---- unary --------------------------------------------------------------

    fn unary(&mut self, a: NodeId, f: impl Fn(T) -> T, op: Op) -> NodeId {
        let value = self.nodes[a.0].value.map(f);
        let needs = self.needs(a);
        self.push(value, needs, op)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = T::from_f64(c);
        self.unary(a, |x| x + cv, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = T::from_f64(c);
        self.unary(a, |x| x * cv, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    /// Elementwise `atan2(y, x)`; `atan2(0, 0) = 0` with zero gradient.
    pub fn atan2(&mut self, y: NodeId, x: NodeId) -> Result<NodeId> {
        let sy = self.shape(y);
        let sx = self.shape(x);
        if sy != sx {
            return Err(Error::dimension("atan2", format!("y shape {:?} != x shape {:?}", sy, sx)));
        }
        let data: Vec<T> = self.nodes[y.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[x.0].value.data())
            .map(|(&yv, &xv)| yv.atan2(xv))
            .collect();
        let value = Array::new(sy.to_vec(), data)?;
        let needs = self.needs(y) || self.needs(x);
        Ok(self.push(value, needs, Op::Atan2 { y, x }))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Array::scalar(s), needs, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.numel();
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Array::scalar(s / T::from_f64(n as f64)), needs, Op::Mean(a))
    }

    /// Max over all elements; ties break to the lowest linear index.
    pub fn max(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.nodes[a.0].value.data();
        if data.is_empty() {
            return Err(Error::Contract("max of empty tensor".into()));
        }
        let mut arg = 0;
        let mut best = data[0];
        for (i, &v) in data.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                arg = i;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Array::scalar(best), needs, Op::MaxAll(a, arg)))
    }

    // ---- shape ops ----------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[a.0].value.reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, needs, Op::Reshape(a)))
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if first.len() < 2 {
            return Err(Error::dimension("concat_channels", format!("need >= 2 axes, got {:?}", first)));
        }
        let mut c_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::dimension(
                    "concat_channels",
                    format!("shape {:?} incompatible with {:?} on non-channel axes", s, first),
                ));
            }
            c_total += s[1];
        }
        let batch = first[0];
        let rest: usize = first[2..].iter().product();
        let mut out_shape = first.clone();
        out_shape[1] = c_total;
        let mut data = Vec::with_capacity(batch * c_total * rest);
        for n in 0..batch {
            for &id in inputs {
                let v = &self.nodes[id.0].value;
                let ci = v.shape()[1];
                let chunk = ci * rest;
                data.extend_from_slice(&v.data()[n * chunk..(n + 1) * chunk]);
            }
        }
        let needs = inputs.iter().any(|&id| self.needs(id));
        let value = Array::new(out_shape, data)?;
        Ok(self.push(value, needs, Op::ConcatCh(inputs.to_vec())))
    }

    /// Take channels `start..start+len` (axis 1).
    pub fn slice_channels(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::dimension("slice_channels", format!("need >= 2 axes, got {:?}", s)));
        }
        if start + len > s[1] {
            return Err(Error::dimension(
                "slice_channels",
                format!("channels {}..{} out of range for {} channels", start, start + len, s[1]),
            ));
        }
        let rest: usize = s[2..].iter().product();
        let mut out_shape = s.clone();
        out_shape[1] = len;
        let mut data = Vec::with_capacity(s[0] * len * rest);
        let v = self.nodes[a.0].value.data();
        for n in 0..s[0] {
            let base = (n * s[1] + start) * rest;
            data.extend_from_slice(&v[base..base + len * rest]);
        }
        let needs = self.needs(a);
        let value = Array::new(out_shape, data)?;
        Ok(self.push(value, needs, Op::SliceCh { input: a, start, len }))
    }

    // ---- matmul / conv / pool -----------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dimension("matmul", format!("need 2-d operands, got {:?} and {:?}", sa, sb)));
        }
        if sa[1] != sb[0] {
            return Err(Error::dimension(
                "matmul",
                format!("inner axes differ: lhs {:?} axis 1 vs rhs {:?} axis 0", sa, sb),
            ));
        }
        let value = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Matmul(a, b)))
    }

    fn conv_geom(&self, input: NodeId, weight: NodeId, groups: usize, stride: usize, padding: usize) -> Result<ConvGeom> {
        let si = self.shape(input);
        let sw = self.shape(weight);
        if si.len() != 4 {
            return Err(Error::dimension("conv2d", format!("input must be [N,C,H,W], got {:?}", si)));
        }
        if sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::dimension("conv2d", format!("weight must be [O,C/g,k,k], got {:?}", sw)));
        }
        if groups == 0 || stride == 0 {
            return Err(Error::Contract("conv2d: groups and stride must be positive".into()));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, k) = (sw[0], sw[2]);
        if c % groups != 0 || o % groups != 0 {
            return Err(Error::dimension(
                "conv2d",
                format!("channel axes not divisible by groups={}: in={}, out={}", groups, c, o),
            ));
        }
        if sw[1] != c / groups {
            return Err(Error::dimension(
                "conv2d",
                format!("weight axis 1 is {}, expected in_channels/groups = {}", sw[1], c / groups),
            ));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::dimension(
                "conv2d",
                format!("kernel {} exceeds padded input {}x{}", k, h + 2 * padding, w + 2 * padding),
            ));
        }
        let oh = ConvGeom::out_extent(h, k, stride, padding);
        let ow = ConvGeom::out_extent(w, k, stride, padding);
        Ok(ConvGeom { n, c_in: c, h, w, c_out: o, k, groups, stride, padding, oh, ow })
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, groups: usize, stride: usize, padding: usize) -> Result<NodeId> {
        let geom = self.conv_geom(input, weight, groups, stride, padding)?;
        let value = kernels::conv2d_forward(&self.nodes[input.0].value, &self.nodes[weight.0].value, &geom);
        let needs = self.needs(input) || self.needs(weight);
        Ok(self.push(value, needs, Op::Conv2d { input, weight, groups, stride, padding }))
    }

    /// Non-overlapping max pooling with `window == stride`; spatial dims must
    /// divide evenly. Ties break to the lowest linear index.
    pub fn maxpool2d(&mut self, input: NodeId, window: usize) -> Result<NodeId> {
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(Error::dimension("maxpool2d", format!("input must be [N,C,H,W], got {:?}", s)));
        }
        if window == 0 || s[2] % window != 0 || s[3] % window != 0 {
            return Err(Error::Contract(format!(
                "maxpool2d: window {} must divide spatial dims {}x{}",
                window, s[2], s[3]
            )));
        }
        let (out_shape, indices) = kernels::pool_argmax(&self.nodes[input.0].value, window);
        let indices = Rc::new(indices);
        let value = kernels::gather(&self.nodes[input.0].value, &indices, &out_shape);
        let needs = self.needs(input);
        Ok(self.push(value, needs, Op::MaxPool { input, indices }))
    }

    /// Per-window argmax indices of `score` (not a tape op; selection data for
    /// `gather_spatial`). Used by the equivariant pool to pick by magnitude.
    pub fn pool_argmax_of(&self, score: NodeId, window: usize) -> Result<(Vec<usize>, Rc<Vec<u32>>)> {
        let s = self.shape(score);
        if s.len() != 4 {
            return Err(Error::dimension("pool_argmax", format!("score must be [N,C,H,W], got {:?}", s)));
        }
        if window == 0 || s[2] % window != 0 || s[3] % window != 0 {
            return Err(Error::Contract(format!(
                "pool window {} must divide spatial dims {}x{}",
                window, s[2], s[3]
            )));
        }
        let (shape, idx) = kernels::pool_argmax(&self.nodes[score.0].value, window);
        Ok((shape, Rc::new(idx)))
    }

    /// Select elements of `input` at precomputed flat indices. The selection is
    /// treated as constant; gradients flow to the selected positions only.
    pub fn gather_spatial(&mut self, input: NodeId, indices: Rc<Vec<u32>>, out_shape: &[usize]) -> Result<NodeId> {
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(Error::dimension(
                "gather_spatial",
                format!("out shape {:?} implies {} elements, got {} indices", out_shape, numel, indices.len()),
            ));
        }
        let in_len = self.nodes[input.0].value.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= in_len) {
            return Err(Error::Contract(format!("gather index {} out of range {}", bad, in_len)));
        }
        let value = kernels::gather(&self.nodes[input.0].value, &indices, out_shape);
        let needs = self.needs(input);
        Ok(self.push(value, needs, Op::Gather { input, indices }))
    }

    // ---- channel-broadcast ops ----------------------------------------------

    fn channel_check(&self, op: &str, x: NodeId, v: NodeId) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        let sv = self.shape(v);
        if sx.len() != 4 || sv.len() != 1 || sv[0] != sx[1] {
            return Err(Error::dimension(
                op,
                format!("expected x [N,C,H,W] and v [C], got {:?} and {:?}", sx, sv),
            ));
        }
        Ok((sx[0], sx[1], sx[2] * sx[3]))
    }

    /// `out[n,c,h,w] = x[n,c,h,w] * v[c]`.
    pub fn channel_mul(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, c, hw) = self.channel_check("channel_mul", x, v)?;
        let xv = self.nodes[x.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut data = Vec::with_capacity(xv.len());
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                let s = vv[cc];
                data.extend(xv[base..base + hw].iter().map(|&e| e * s));
            }
        }
        let value = Array::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(value, needs, Op::ChannelMul(x, v)))
    }

    /// `out[n,c,h,w] = x[n,c,h,w] + v[c]`.
    pub fn channel_add(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, c, hw) = self.channel_check("channel_add", x, v)?;
        let xv = self.nodes[x.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut data = Vec::with_capacity(xv.len());
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * hw;
                let s = vv[cc];
                data.extend(xv[base..base + hw].iter().map(|&e| e + s));
            }
        }
        let value = Array::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(value, needs, Op::ChannelAdd(x, v)))
    }

    /// Mean over batch and spatial axes, per channel: `[N,C,H,W] -> [C]`.
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::dimension("channel_mean", format!("input must be [N,C,H,W], got {:?}", s)));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xv = self.nodes[x.0].value.data();
        let denom = T::from_f64((n * hw) as f64);
        let mut acc = vec![T::zero(); c];
        for nn in 0..n {
            for (cc, a) in acc.iter_mut().enumerate() {
                let base = (nn * c + cc) * hw;
                let mut s = T::zero();
                for &e in &xv[base..base + hw] {
                    s += e;
                }
                *a += s;
            }
        }
        for a in acc.iter_mut() {
            *a /= denom;
        }
        let needs = self.needs(x);
        let value = Array::new(vec![c], acc)?;
        Ok(self.push(value, needs, Op::ChannelMean(x)))
    }

    /// Mean over spatial axes: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn spatial_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::dimension("spatial_mean", format!("input must be [N,C,H,W], got {:?}", s)));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xv = self.nodes[x.0].value.data();
        let denom = T::from_f64(hw as f64);
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n * c {
            let mut acc = T::zero();
            for &e in &xv[i * hw..(i + 1) * hw] {
                acc += e;
            }
            data.push(acc / denom);
        }
        let needs = self.needs(x);
        let value = Array::new(vec![n, c, 1, 1], data)?;
        Ok(self.push(value, needs, Op::SpatialMean(x)))
    }

    // ---- classification loss -------------------------------------------------

    /// Row-wise log-softmax over `[N,K]` logits (max-shifted for stability).
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dimension("log_softmax", format!("input must be [N,K], got {:?}", s)));
        }
        let (n, k) = (s[0], s[1]);
        let xv = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(n * k);
        for row in xv.chunks_exact(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            data.extend(row.iter().map(|&v| v - lse));
        }
        let needs = self.needs(x);
        let value = Array::new(vec![n, k], data)?;
        Ok(self.push(value, needs, Op::LogSoftmax(x)))
    }

    /// Mean negative log-likelihood of the labelled entries of `[N,K]`
    /// log-probabilities: the softmax cross-entropy when fed `log_softmax`.
    pub fn nll_mean(&mut self, logp: NodeId, labels: &[u16]) -> Result<NodeId> {
        let s = self.shape(logp);
        if s.len() != 2 {
            return Err(Error::dimension("nll_mean", format!("input must be [N,K], got {:?}", s)));
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::dimension("nll_mean", format!("{} labels for batch of {}", labels.len(), n)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Contract(format!("label {} out of range for {} classes", bad, k)));
        }
        let v = self.nodes[logp.0].value.data();
        let mut acc = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            acc += v[i * k + l as usize];
        }
        let loss = -acc / T::from_f64(n as f64);
        let needs = self.needs(logp);
        Ok(self.push(Array::scalar(loss), needs, Op::NllMean { logp, labels: labels.to_vec() }))
    }

    // ---- backward -------------------------------------------------------------

    fn accum(&mut self, id: NodeId, g: Array<T>) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => {
                for (e, &v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            None => node.grad = Some(g),
        }
    }

    /// Reduce a full-shape gradient onto a batch-broadcast rhs operand.
    fn reduce_rhs(g: &Array<T>, inner: usize) -> Array<T> {
        let mut out = vec![T::zero(); inner];
        for chunk in g.data().chunks_exact(inner) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Array::new(vec![inner], out).expect("reduce shape")
    }

    fn rhs_grad(&self, b: NodeId, g: Array<T>) -> Array<T> {
        let sb = self.shape(b);
        if g.shape() == sb {
            g
        } else {
            let reduced = Self::reduce_rhs(&g, self.nodes[b.0].value.numel());
            reduced.reshaped(sb).expect("rhs grad shape")
        }
    }

    /// Populate gradients of every `needs_grad` node reachable from `loss`.
    /// `loss` must hold exactly one element. Consumes the op records: a tape
    /// supports one backward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.consumed {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        self.consumed = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing reachable requires gradients
        }
        self.nodes[loss.0].grad = Some(Array::full(self.shape(loss), T::one()));

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let g = self.nodes[i].grad.take().expect("grad present");
            self.dispatch(NodeId(i), op, g)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, out: NodeId, op: Op, g: Array<T>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let gb = self.rhs_grad(b, g.clone());
                self.accum(a, g);
                self.accum(b, gb);
            }
            Op::Sub(a, b) => {
                let gb = self.rhs_grad(b, g.map(|v| -v));
                self.accum(a, g);
                self.accum(b, gb);
            }
            Op::Mul(a, b) => {
                let inner = self.nodes[b.0].value.numel();
                if self.needs(a) {
                    let bv = self.nodes[b.0].value.data();
                    let ga_data: Vec<T> = g.data().iter().enumerate().map(|(i, &gv)| gv * bv[i % inner]).collect();
                    let ga = Array::new(g.shape().to_vec(), ga_data)?;
                    self.accum(a, ga);
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].value.data();
                    let gb_data: Vec<T> = g.data().iter().enumerate().map(|(i, &gv)| gv * av[i]).collect();
                    let gb = self.rhs_grad(b, Array::new(g.shape().to_vec(), gb_data)?);
                    self.accum(b, gb);
                }
            }
            Op::Div(a, b) => {
                let inner = self.nodes[b.0].value.numel();
                if self.needs(a) {
                    let bv = self.nodes[b.0].value.data();
                    let ga_data: Vec<T> = g.data().iter().enumerate().map(|(i, &gv)| gv / bv[i % inner]).collect();
                    let ga = Array::new(g.shape().to_vec(), ga_data)?;
                    self.accum(a, ga);
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let gb_data: Vec<T> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let bvv = bv[i % inner];
                            -gv * av[i] / (bvv * bvv)
                        })
                        .collect();
                    let gb = self.rhs_grad(b, Array::new(g.shape().to_vec(), gb_data)?);
                    self.accum(b, gb);
                }
            }
            Op::AddScalar(a) => self.accum(a, g),
            Op::Scale(a, c) => {
                let cv = T::from_f64(c);
                self.accum(a, g.map(|v| v * cv));
            }
            Op::Neg(a) => self.accum(a, g.map(|v| -v)),
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.data();
                let data: Vec<T> = g
                    .data()
                    .iter()
                    .zip(av)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accum(a, Array::new(g.shape().to_vec(), data)?);
            }
            Op::Exp(a) => {
                let ov = self.nodes[out.0].value.data();
                let data: Vec<T> = g.data().iter().zip(ov).map(|(&gv, &o)| gv * o).collect();
                self.accum(a, Array::new(g.shape().to_vec(), data)?);
            }
            Op::Log(a) => {
                let av = self.nodes[a.0].value.data();
                let data: Vec<T> = g.data().iter().zip(av).map(|(&gv, &xv)| gv / xv).collect();
                self.accum(a, Array::new(g.shape().to_vec(), data)?);
            }
            Op::Sqrt(a) => {
                let ov = self.nodes[out.0].value.data();
                let half = T::from_f64(0.5);
                let data: Vec<T> = g.data().iter().zip(ov).map(|(&gv, &o)| gv * half / o).collect();
                self.accum(a, Array::new(g.shape().to_vec(), data)?);
            }
            Op::Atan2 { y, x } => {
                let yv = self.nodes[y.0].value.data();
                let xv = self.nodes[x.0].value.data();
                if self.needs(y) {
                    let data: Vec<T> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let d = xv[i] * xv[i] + yv[i] * yv[i];
                            if d == T::zero() {
                                T::zero()
                            } else {
                                gv * xv[i] / d
                            }
                        })
                        .collect();
                    self.accum(y, Array::new(g.shape().to_vec(), data)?);
                }
                if self.needs(x) {
                    let data: Vec<T> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let d = xv[i] * xv[i] + yv[i] * yv[i];
                            if d == T::zero() {
                                T::zero()
                            } else {
                                -gv * yv[i] / d
                            }
                        })
                        .collect();
                    self.accum(x, Array::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accum(a, Array::full(self.shape(a), gv));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let gv = g.data()[0] / T::from_f64(n as f64);
                self.accum(a, Array::full(self.shape(a), gv));
            }
            Op::MaxAll(a, arg) => {
                let mut da = Array::zeros(self.shape(a));
                da.data_mut()[arg] = g.data()[0];
                self.accum(a, da);
            }
            Op::Reshape(a) => {
                let ga = g.reshaped(self.shape(a))?;
                self.accum(a, ga);
            }
            Op::ConcatCh(inputs) => {
                let out_shape = self.shape(out).to_vec();
                let batch = out_shape[0];
                let rest: usize = out_shape[2..].iter().product();
                let c_total = out_shape[1];
                let mut offset_c = 0;
                for &id in &inputs {
                    let ci = self.shape(id)[1];
                    if self.needs(id) {
                        let mut da = Array::zeros(self.shape(id));
                        for n in 0..batch {
                            let src = (n * c_total + offset_c) * rest;
                            let dst = n * ci * rest;
                            da.data_mut()[dst..dst + ci * rest].copy_from_slice(&g.data()[src..src + ci * rest]);
                        }
                        self.accum(id, da);
                    }
                    offset_c += ci;
                }
            }
            Op::SliceCh { input, start, len } => {
                let s = self.shape(input).to_vec();
                let rest: usize = s[2..].iter().product();
                let mut da = Array::zeros(&s);
                for n in 0..s[0] {
                    let dst = (n * s[1] + start) * rest;
                    let src = n * len * rest;
                    da.data_mut()[dst..dst + len * rest].copy_from_slice(&g.data()[src..src + len * rest]);
                }
                self.accum(input, da);
            }
            Op::Matmul(a, b) => {
                if self.needs(a) {
                    let da = kernels::matmul_da(&g, &self.nodes[b.0].value);
                    self.accum(a, da);
                }
                if self.needs(b) {
                    let db = kernels::matmul_db(&g, &self.nodes[a.0].value);
                    self.accum(b, db);
                }
            }
            Op::Conv2d { input, weight, groups, stride, padding } => {
                let geom = self.conv_geom(input, weight, groups, stride, padding)?;
                if self.needs(input) {
                    let din = kernels::conv2d_backward_input(&g, &self.nodes[weight.0].value, &geom);
                    self.accum(input, din);
                }
                if self.needs(weight) {
                    let dw = kernels::conv2d_backward_weight(&g, &self.nodes[input.0].value, &geom);
                    self.accum(weight, dw);
                }
            }
            Op::MaxPool { input, indices } | Op::Gather { input, indices } => {
                let mut da = Array::zeros(self.shape(input));
                kernels::scatter_add(&g, &indices, &mut da);
                self.accum(input, da);
            }
            Op::ChannelMul(x, v) => {
                let sx = self.shape(x).to_vec();
                let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                if self.needs(x) {
                    let vv = self.nodes[v.0].value.data();
                    let mut data = Vec::with_capacity(g.numel());
                    for nn in 0..n {
                        for cc in 0..c {
                            let base = (nn * c + cc) * hw;
                            let s = vv[cc];
                            data.extend(g.data()[base..base + hw].iter().map(|&e| e * s));
                        }
                    }
                    self.accum(x, Array::new(sx.clone(), data)?);
                }
                if self.needs(v) {
                    let xv = self.nodes[x.0].value.data();
                    let mut dv = vec![T::zero(); c];
                    for nn in 0..n {
                        for (cc, d) in dv.iter_mut().enumerate() {
                            let base = (nn * c + cc) * hw;
                            let mut acc = T::zero();
                            for (gv, xvv) in g.data()[base..base + hw].iter().zip(&xv[base..base + hw]) {
                                acc += *gv * *xvv;
                            }
                            *d += acc;
                        }
                    }
                    self.accum(v, Array::new(vec![c], dv)?);
                }
            }
            Op::ChannelAdd(x, v) => {
                let sx = self.shape(x).to_vec();
                let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                if self.needs(x) {
                    self.accum(x, g.clone());
                }
                if self.needs(v) {
                    let mut dv = vec![T::zero(); c];
                    for nn in 0..n {
                        for (cc, d) in dv.iter_mut().enumerate() {
                            let base = (nn * c + cc) * hw;
                            let mut acc = T::zero();
                            for gv in &g.data()[base..base + hw] {
                                acc += *gv;
                            }
                            *d += acc;
                        }
                    }
                    self.accum(v, Array::new(vec![c], dv)?);
                }
            }
            Op::ChannelMean(x) => {
                let sx = self.shape(x).to_vec();
                let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let denom = T::from_f64((n * hw) as f64);
                let mut data = Vec::with_capacity(n * c * hw);
                for _nn in 0..n {
                    for cc in 0..c {
                        let gv = g.data()[cc] / denom;
                        data.extend(std::iter::repeat(gv).take(hw));
                    }
                }
                self.accum(x, Array::new(sx, data)?);
            }
            Op::SpatialMean(x) => {
                let sx = self.shape(x).to_vec();
                let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let denom = T::from_f64(hw as f64);
                let mut data = Vec::with_capacity(n * c * hw);
                for i in 0..n * c {
                    let gv = g.data()[i] / denom;
                    data.extend(std::iter::repeat(gv).take(hw));
                }
                self.accum(x, Array::new(sx, data)?);
            }
            Op::LogSoftmax(x) => {
                let s = self.shape(out).to_vec();
                let (n, k) = (s[0], s[1]);
                let ov = self.nodes[out.0].value.data();
                let mut data = Vec::with_capacity(n * k);
                for i in 0..n {
                    let grow = &g.data()[i * k..(i + 1) * k];
                    let orow = &ov[i * k..(i + 1) * k];
                    let gsum: T = grow.iter().copied().sum();
                    for (gv, o) in grow.iter().zip(orow) {
                        data.push(*gv - o.exp() * gsum);
                    }
                }
                self.accum(x, Array::new(s, data)?);
            }
            Op::NllMean { logp, labels } => {
                let s = self.shape(logp).to_vec();
                let (n, k) = (s[0], s[1]);
                let gv = g.data()[0];
                let scale = gv / T::from_f64(n as f64);
                let mut da = Array::zeros(&s);
                for (i, &l) in labels.iter().enumerate() {
                    da.data_mut()[i * k + l as usize] = -scale;
                }
                self.accum(logp, da);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> Array<f64> {
        Array::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn maxpool_then_sum_gradient_hits_argmax_only() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[1, 1, 2, 2], &[1.0, 3.0, 2.0, 0.5]), true);
        let p = t.maxpool2d(x, 2).unwrap();
        let loss = t.sum(p);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_and_mean_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[3], &[-1.0, 0.0, 2.0]), false);
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let m = t.leaf(arr(&[4], &[7.0; 4]), false);
        let mv = t.mean(m);
        assert_eq!(t.value(mv).data(), &[7.0]);
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Array::full(&[1, 1, 3, 3], 1.0), false);
        let w = t.leaf(Array::full(&[1, 1, 3, 3], 1.0), false);
        let y = t.conv2d(x, w, 1, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut t = Tape::<f64>::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.25).collect();
        let x = t.leaf(arr(&[1, 1, 4, 4], &data), false);
        let w = t.leaf(arr(&[1, 1, 1, 1], &[1.0]), false);
        let y = t.conv2d(x, w, 1, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn conv2d_rejects_bad_group_split() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Array::zeros(&[1, 3, 4, 4]), false);
        let w = t.leaf(Array::zeros(&[2, 1, 3, 3]), false);
        let err = t.conv2d(x, w, 2, 1, 1).unwrap_err();
        assert!(err.to_string().contains("groups"), "unexpected: {err}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[2], &[1.0, 2.0]), true);
        let y = t.mul(x, x).unwrap();
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn batch_broadcast_add_reduces_bias_grad() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[2, 3], &[0.0; 6]), false);
        let b = t.leaf(arr(&[3], &[1.0, 2.0, 3.0]), true);
        let y = t.add(x, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn mismatched_shapes_name_the_axes() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Array::zeros(&[2, 3]), false);
        let b = t.leaf(Array::zeros(&[4]), false);
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "unexpected: {msg}");
    }
}
