//! Dynamic tape of tensor operations with reverse-mode accumulation.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] consumes the tape and yields a [`Gradients`] table for
//! every tracked leaf. Tapes are independent of each other, so per-sample
//! graphs over the same (read-only) parameters can be built on separate
//! threads and their gradients reduced afterwards in a fixed order.

use std::collections::HashMap;

use super::params::ParamSet;
use super::tensor::{check_shape, numel, DiffTensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv { x: Var, w: Var, b: Var, k: usize },
    Depthwise { x: Var, w: Var, b: Var, k: usize },
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ChannelShuffle(Var, usize),
    GroupMax { x: Var, argmax: Vec<usize> },
    GroupAvg(Var, usize),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    SquaredError(Var, Var),
    Reshape(Var),
    Gather { x: Var, indices: Vec<usize> },
    LogSumExp(Var),
    SelectBlocks { x: Var, blocks: Vec<usize>, width: usize },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// The primitive operations exposed through [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Conv1x1,
    Conv3x3,
    DepthwiseConv5x5,
    Relu,
    Softmax,
    LogSoftmax,
    ChannelShuffle(usize),
    ChannelGroupMax(usize),
    ChannelGroupAvg(usize),
    ConcatChannels,
    Add,
    Scale(f64),
    ReduceMean,
    SquaredError,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Conv1x1 => "conv2d_1x1",
            Primitive::Conv3x3 => "conv2d_3x3",
            Primitive::DepthwiseConv5x5 => "depthwise_conv2d_5x5",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::ChannelShuffle(_) => "channel_shuffle",
            Primitive::ChannelGroupMax(_) => "channel_group_max",
            Primitive::ChannelGroupAvg(_) => "channel_group_avg",
            Primitive::ConcatChannels => "concat_channels",
            Primitive::Add => "add",
            Primitive::Scale(_) => "scale",
            Primitive::ReduceMean => "reduce_mean",
            Primitive::SquaredError => "squared_error",
        }
    }
}

/// Destination index of input channel `c` under a `groups`-way shuffle of
/// `channels` channels.
pub fn shuffle_index(c: usize, channels: usize, groups: usize) -> usize {
    (c % groups) * (channels / groups) + c / groups
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Var, String)>,
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn to_tensor(&self, v: Var) -> DiffTensor {
        let n = self.node(v);
        DiffTensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are validated")
    }

    /// Leaf copied from `t`; tracked iff `t.requires_grad()`.
    pub fn input(&mut self, t: &DiffTensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            op: Op::Leaf,
            tracked: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Var> {
        let shape = shape.into();
        check_shape("constant", &shape, values.len())?;
        self.nodes.push(Node {
            shape,
            value: values,
            op: Op::Leaf,
            tracked: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf bound to `params[path]`; its gradient is routed back by
    /// [`Gradients::accumulate_into`].
    pub fn param(&mut self, params: &ParamSet, path: &str) -> Result<Var> {
        let v = self.input(params.get(path)?);
        self.bindings.push((v, path.to_string()));
        Ok(v)
    }

    /// Binds every parameter of `params`. Parameters that end up unused
    /// receive zero gradients.
    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        let mut vars = HashMap::with_capacity(params.len());
        for (path, t) in params.iter() {
            let v = self.input(t);
            self.bindings.push((v, path.to_string()));
            vars.insert(path.to_string(), v);
        }
        Bound { vars }
    }

    /// Same as [`Graph::bind`] but the leaves are untracked, so no gradient
    /// reaches `params` (frozen modules).
    pub fn bind_frozen(&mut self, params: &ParamSet) -> Bound {
        let mut vars = HashMap::with_capacity(params.len());
        for (path, t) in params.iter() {
            let v = self
                .constant(t.shape().to_vec(), t.values().to_vec())
                .expect("parameter shapes are valid");
            vars.insert(path.to_string(), v);
        }
        Bound { vars }
    }

    /// Evaluates one of the named primitives.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            Primitive::MatMul | Primitive::Add | Primitive::SquaredError => 2,
            Primitive::Conv1x1 | Primitive::Conv3x3 | Primitive::DepthwiseConv5x5 => 3,
            Primitive::ConcatChannels => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::invalid(
                kind.name(),
                format!("expected {arity} inputs, got {}", inputs.len()),
            ));
        }
        match kind {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Conv1x1 => self.conv2d_1x1(inputs[0], inputs[1], inputs[2]),
            Primitive::Conv3x3 => self.conv2d_3x3(inputs[0], inputs[1], inputs[2]),
            Primitive::DepthwiseConv5x5 => {
                self.depthwise_conv2d_5x5(inputs[0], inputs[1], inputs[2])
            }
            Primitive::Relu => Ok(self.relu(inputs[0])),
            Primitive::Softmax => Ok(self.softmax(inputs[0])),
            Primitive::LogSoftmax => Ok(self.log_softmax(inputs[0])),
            Primitive::ChannelShuffle(g) => self.channel_shuffle(inputs[0], g),
            Primitive::ChannelGroupMax(g) => self.channel_group_max(inputs[0], g),
            Primitive::ChannelGroupAvg(g) => self.channel_group_avg(inputs[0], g),
            Primitive::ConcatChannels => self.concat_channels(inputs),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Scale(k) => Ok(self.scale(inputs[0], k)),
            Primitive::ReduceMean => Ok(self.reduce_mean(inputs[0])),
            Primitive::SquaredError => self.squared_error(inputs[0], inputs[1]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds `bias` (shape `[n]`) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().expect("non-empty shape");
        if sb.len() != 1 || sb[0] != n {
            return Err(Error::shape("add_bias", format!("{sx:?} + bias {sb:?}")));
        }
        let bv = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % n])
            .collect();
        let shape = sx.to_vec();
        Ok(self.push(shape, out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x @ weight + bias` for `x: [rows, in]`, `weight: [in, out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    fn conv_forward(&self, op: &'static str, x: Var, w: Var, b: Var, k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 {
            return Err(Error::shape(op, format!("input must be (C,H,W), got {sx:?}")));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let co = sw[0];
        let kernel_ok = if k == 1 {
            sw.len() == 2 && sw[1] == ci
        } else {
            sw.len() == 4 && sw[1] == ci && sw[2] == k && sw[3] == k
        };
        if !kernel_ok {
            return Err(Error::shape(
                op,
                format!("kernel {sw:?} incompatible with {ci} input channels"),
            ));
        }
        if sb != [co] {
            return Err(Error::shape(op, format!("bias {sb:?} for {co} output channels")));
        }
        let pad = (k / 2) as isize;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let hw = h * wd;
        let mut out = vec![0.0; co * hw];
        for o in 0..co {
            let plane = &mut out[o * hw..(o + 1) * hw];
            plane.iter_mut().for_each(|p| *p = bv[o]);
            for i in 0..ci {
                let xin = &xv[i * hw..(i + 1) * hw];
                for u in 0..k {
                    for v in 0..k {
                        let wt = wv[((o * ci + i) * k + u) * k + v];
                        if wt == 0.0 {
                            continue;
                        }
                        let dy = u as isize - pad;
                        let dx = v as isize - pad;
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..wd {
                                let sx = xx as isize + dx;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                plane[y * wd + xx] += wt * xin[sy as usize * wd + sx as usize];
                            }
                        }
                    }
                }
            }
        }
        Ok((vec![co, h, wd], out))
    }

    /// Pointwise convolution, `weight: [out, in]`, `bias: [out]`.
    pub fn conv2d_1x1(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (shape, out) = self.conv_forward("conv2d_1x1", x, weight, bias, 1)?;
        Ok(self.push(shape, out, Op::Conv { x, w: weight, b: bias, k: 1 }, &[x, weight, bias]))
    }

    /// Zero-padded "same" 3x3 convolution, `weight: [out, in, 3, 3]`.
    pub fn conv2d_3x3(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (shape, out) = self.conv_forward("conv2d_3x3", x, weight, bias, 3)?;
        Ok(self.push(shape, out, Op::Conv { x, w: weight, b: bias, k: 3 }, &[x, weight, bias]))
    }

    /// Zero-padded "same" depthwise 5x5 convolution, `weight: [C, 5, 5]`.
    pub fn depthwise_conv2d_5x5(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        const K: usize = 5;
        let (sx, sw, sb) = (self.shape(x), self.shape(weight), self.shape(bias));
        if sx.len() != 3 {
            return Err(Error::shape(
                "depthwise_conv2d_5x5",
                format!("input must be (C,H,W), got {sx:?}"),
            ));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        if sw != [c, K, K] || sb != [c] {
            return Err(Error::shape(
                "depthwise_conv2d_5x5",
                format!("kernel {sw:?} / bias {sb:?} for {c} channels"),
            ));
        }
        let pad = (K / 2) as isize;
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let hw = h * wd;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bv[ch];
                    for u in 0..K {
                        let sy = y as isize + u as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for v in 0..K {
                            let sx = xx as isize + v as isize - pad;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            acc += wv[(ch * K + u) * K + v]
                                * xv[ch * hw + sy as usize * wd + sx as usize];
                        }
                    }
                    out[ch * hw + y * wd + xx] = acc;
                }
            }
        }
        Ok(self.push(
            vec![c, h, wd],
            out,
            Op::Depthwise { x, w: weight, b: bias, k: K },
            &[x, weight, bias],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Exp(x), &[x])
    }

    fn rows(&self, x: Var) -> (usize, usize) {
        let n = *self.shape(x).last().expect("non-empty shape");
        (self.value(x).len() / n, n)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, n) = self.rows(x);
        let xv = self.value(x);
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            let row = &xv[i * n..(i + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            out[i * n..(i + 1) * n].iter_mut().for_each(|o| *o /= z);
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Softmax(x), &[x])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (r, n) = self.rows(x);
        let xv = self.value(x);
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            let row = &xv[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::LogSoftmax(x), &[x])
    }

    fn grouped(&self, op: &'static str, x: Var, groups: usize) -> Result<(usize, usize)> {
        let sx = self.shape(x);
        let c = sx[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                op,
                format!("{groups} groups do not divide {c} channels"),
            ));
        }
        Ok((c, numel(&sx[1..])))
    }

    /// Moves channel `c` to [`shuffle_index`]`(c, C, groups)`.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (c, sp) = self.grouped("channel_shuffle", x, groups)?;
        let xv = self.value(x);
        let mut out = vec![0.0; c * sp];
        for ch in 0..c {
            let d = shuffle_index(ch, c, groups);
            out[d * sp..(d + 1) * sp].copy_from_slice(&xv[ch * sp..(ch + 1) * sp]);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::ChannelShuffle(x, groups), &[x]))
    }

    /// Max over the channels of each of `groups` contiguous channel blocks.
    /// Ties go to the lowest channel index.
    pub fn channel_group_max(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (c, sp) = self.grouped("channel_group_max", x, groups)?;
        let cg = c / groups;
        let xv = self.value(x);
        let mut out = vec![0.0; groups * sp];
        let mut argmax = vec![0usize; groups * sp];
        for g in 0..groups {
            for p in 0..sp {
                let mut best = g * cg;
                for ch in g * cg + 1..(g + 1) * cg {
                    if xv[ch * sp + p] > xv[best * sp + p] {
                        best = ch;
                    }
                }
                out[g * sp + p] = xv[best * sp + p];
                argmax[g * sp + p] = best;
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = groups;
        Ok(self.push(shape, out, Op::GroupMax { x, argmax }, &[x]))
    }

    /// Mean over the channels of each of `groups` contiguous channel blocks.
    pub fn channel_group_avg(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (c, sp) = self.grouped("channel_group_avg", x, groups)?;
        let cg = c / groups;
        let xv = self.value(x);
        let mut out = vec![0.0; groups * sp];
        for g in 0..groups {
            for p in 0..sp {
                let s: f64 = (g * cg..(g + 1) * cg).map(|ch| xv[ch * sp + p]).sum();
                out[g * sp + p] = s / cg as f64;
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = groups;
        Ok(self.push(shape, out, Op::GroupAvg(x, groups), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                let xv = self.value(v);
                out.extend_from_slice(&xv[o * d * inner..(o + 1) * d * inner]);
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        self.concat(inputs, 0)
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let axis = self.shape(first).len() - 1;
        self.concat(inputs, axis)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {sx:?}", start + len),
            ));
        }
        let (outer, d, inner) = axis_split(&sx, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, node: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * k).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, k), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + k).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::AddScalar(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![m], Op::Mean(x), &[x])
    }

    /// Sums the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let (r, n) = self.rows(x);
        let xv = self.value(x);
        let out = (0..r).map(|i| xv[i * n..(i + 1) * n].iter().sum()).collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("non-empty") = 1;
        self.push(shape, out, Op::SumLast(x), &[x])
    }

    /// `sum((a - b)^2)` as a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("squared_error", a, b)?;
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(vec![1], vec![s], Op::SquaredError(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        check_shape("reshape", &shape, self.value(x).len())?;
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x), &[x]))
    }

    /// Flat gather: `out[i] = x.flat[indices[i]]`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if indices.is_empty() || indices.iter().any(|&i| i >= xv.len()) {
            return Err(Error::shape(
                "gather",
                format!("indices {indices:?} into {} values", xv.len()),
            ));
        }
        let out = indices.iter().map(|&i| xv[i]).collect();
        Ok(self.push(
            vec![indices.len()],
            out,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    /// `log(sum(exp(x)))` over all elements.
    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let s = log_sum_exp(self.value(x));
        self.push(vec![1], vec![s], Op::LogSumExp(x), &[x])
    }

    /// Row `r` of the output is block `blocks[r]` (of `width` columns) of
    /// row `r` of `x: [rows, K * width]`.
    pub fn select_blocks(&mut self, x: Var, blocks: &[usize], width: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || blocks.len() != sx[0] || width == 0 || sx[1] % width != 0 {
            return Err(Error::shape(
                "select_blocks",
                format!("{sx:?} with {} blocks of width {width}", blocks.len()),
            ));
        }
        let k = sx[1] / width;
        if let Some(b) = blocks.iter().find(|&&b| b >= k) {
            return Err(Error::shape("select_blocks", format!("block {b} of {k}")));
        }
        let cols = sx[1];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(blocks.len() * width);
        for (r, &b) in blocks.iter().enumerate() {
            let base = r * cols + b * width;
            out.extend_from_slice(&xv[base..base + width]);
        }
        Ok(self.push(
            vec![blocks.len(), width],
            out,
            Op::SelectBlocks {
                x,
                blocks: blocks.to_vec(),
                width,
            },
            &[x],
        ))
    }

    /// Reverse pass from a scalar root. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[root.0].tracked {
            grads[root.0] = Some(vec![1.0]);
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let mut leaves = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[id].tracked {
                    leaves.insert(id, g);
                }
            }
        }
        let sizes = self
            .bindings
            .iter()
            .map(|(v, _)| self.nodes[v.0].value.len())
            .collect();
        Ok(Gradients {
            leaves,
            bindings: self.bindings,
            binding_sizes: sizes,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..nn {
                                s += g[i * nn + j] * bv[p * nn + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..nn {
                                gb[p * nn + j] += x * g[i * nn + j];
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += d));
                acc(*b, &mut |gb| {
                    for (i, d) in g.iter().enumerate() {
                        gb[i % n] += d;
                    }
                });
            }
            Op::Conv { x, w, b, k } => self.conv_backward(*x, *w, *b, *k, g, &mut acc),
            Op::Depthwise { x, w, b, k } => {
                let k = *k;
                let sx = self.shape(*x);
                let (c, h, wd) = (sx[0], sx[1], sx[2]);
                let hw = h * wd;
                let pad = (k / 2) as isize;
                let (xv, wv) = (self.value(*x), self.value(*w));
                let each = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..wd {
                                for u in 0..k {
                                    let sy = y as isize + u as isize - pad;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for v in 0..k {
                                        let sxx = xx as isize + v as isize - pad;
                                        if sxx < 0 || sxx >= wd as isize {
                                            continue;
                                        }
                                        f(
                                            ch * hw + y * wd + xx,
                                            (ch * k + u) * k + v,
                                            ch * hw + sy as usize * wd + sxx as usize,
                                        );
                                    }
                                }
                            }
                        }
                    }
                };
                acc(*x, &mut |gx| each(&mut |o, wi, xi| gx[xi] += wv[wi] * g[o]));
                acc(*w, &mut |gw| each(&mut |o, wi, xi| gw[wi] += xv[xi] * g[o]));
                acc(*b, &mut |gb| {
                    for ch in 0..c {
                        gb[ch] += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i];
                    }
                });
            }
            Op::Softmax(x) => {
                let (r, n) = self.rows(*x);
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        let row = i * n..(i + 1) * n;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (r, n) = self.rows(*x);
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        let row = i * n..(i + 1) * n;
                        let total: f64 = g[row.clone()].iter().sum();
                        for j in row {
                            gx[j] += g[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::ChannelShuffle(x, groups) => {
                let c = self.shape(*x)[0];
                let sp = node.value.len() / c;
                acc(*x, &mut |gx| {
                    for ch in 0..c {
                        let d = shuffle_index(ch, c, *groups);
                        for p in 0..sp {
                            gx[ch * sp + p] += g[d * sp + p];
                        }
                    }
                });
            }
            Op::GroupMax { x, argmax } => {
                let groups = node.shape[0];
                let sp = node.value.len() / groups;
                acc(*x, &mut |gx| {
                    for (o, &ch) in argmax.iter().enumerate() {
                        gx[ch * sp + o % sp] += g[o];
                    }
                });
            }
            Op::GroupAvg(x, groups) => {
                let c = self.shape(*x)[0];
                let cg = c / groups;
                let sp = node.value.len() / groups;
                acc(*x, &mut |gx| {
                    for ch in 0..c {
                        let gi = ch / cg;
                        for p in 0..sp {
                            gx[ch * sp + p] += g[gi * sp + p] / cg as f64;
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let d = self.shape(v)[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * d * inner;
                            for i in 0..d * inner {
                                gv[dst + i] += g[src + i];
                            }
                        }
                    });
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, d, inner) = axis_split(self.shape(*x), *axis);
                let len = node.shape[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * d + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            gx[dst + i] += g[src + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(x, k) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += k * d));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, d)| *a += d));
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::SumLast(x) => {
                let (_, n) = self.rows(*x);
                acc(*x, &mut |gx| {
                    for (i, a) in gx.iter_mut().enumerate() {
                        *a += g[i / n];
                    }
                });
            }
            Op::SquaredError(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += 2.0 * (av[i] - bv[i]) * g[0];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= 2.0 * (av[i] - bv[i]) * g[0];
                    }
                });
            }
            Op::Gather { x, indices } => {
                acc(*x, &mut |gx| {
                    for (o, &i) in indices.iter().enumerate() {
                        gx[i] += g[o];
                    }
                });
            }
            Op::LogSumExp(x) => {
                let xv = self.value(*x);
                let lse = node.value[0];
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[0] * (xv[i] - lse).exp();
                    }
                });
            }
            Op::SelectBlocks { x, blocks, width } => {
                let cols = self.shape(*x)[1];
                acc(*x, &mut |gx| {
                    for (r, &b) in blocks.iter().enumerate() {
                        let base = r * cols + b * width;
                        for j in 0..*width {
                            gx[base + j] += g[r * width + j];
                        }
                    }
                });
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        g: &[f64],
        acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let sx = self.shape(x);
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let co = self.shape(w)[0];
        let hw = h * wd;
        let pad = (k / 2) as isize;
        let (xv, wv) = (self.value(x), self.value(w));
        let each = |f: &mut dyn FnMut(usize, usize, usize)| {
            for o in 0..co {
                for i in 0..ci {
                    for u in 0..k {
                        let dy = u as isize - pad;
                        for v in 0..k {
                            let dx = v as isize - pad;
                            let wi = ((o * ci + i) * k + u) * k + v;
                            for y in 0..h {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for xx in 0..wd {
                                    let sxx = xx as isize + dx;
                                    if sxx < 0 || sxx >= wd as isize {
                                        continue;
                                    }
                                    f(o * hw + y * wd + xx, wi, i * hw + sy as usize * wd + sxx as usize);
                                }
                            }
                        }
                    }
                }
            }
        };
        acc(x, &mut |gx| each(&mut |o, wi, xi| gx[xi] += wv[wi] * g[o]));
        acc(w, &mut |gw| each(&mut |o, wi, xi| gw[wi] += xv[xi] * g[o]));
        acc(b, &mut |gb| {
            for o in 0..co {
                gb[o] += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
            }
        });
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Named leaves created by [`Graph::bind`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars.get(path).copied().ok_or_else(|| Error::UnknownParam {
            path: path.to_string(),
        })
    }
}

/// Gradients of the tracked leaves of a finished tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    bindings: Vec<(Var, String)>,
    binding_sizes: Vec<usize>,
}

impl Gradients {
    /// `None` for untracked leaves and leaves the root does not depend on.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    /// Adds the gradient of `v` into `t.grad` (zeros if unreachable).
    pub fn write_into(&self, v: Var, t: &mut DiffTensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
    }

    /// Adds every bound parameter's gradient into `params`. Bound parameters
    /// the root does not depend on receive zeros; bindings to other sets are
    /// skipped.
    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<()> {
        for ((v, path), &size) in self.bindings.iter().zip(&self.binding_sizes) {
            if !params.contains(path) {
                continue;
            }
            let t = params.get_mut(path)?;
            if t.len() != size {
                return Err(Error::shape(
                    "accumulate_into",
                    format!("`{path}` has {} values, tape had {size}", t.len()),
                ));
            }
            self.write_into(*v, t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(g: &mut Graph, v: &[f64], tracked: bool) -> Var {
        let t = DiffTensor::vector(v.to_vec()).unwrap();
        g.input(&if tracked { t.tracked() } else { t })
    }

    #[test]
    fn shuffle_interleaves_two_groups() {
        let mut g = Graph::new();
        let x = g.constant(vec![4, 1, 1], vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let y = g.channel_shuffle(x, 2).unwrap();
        assert_eq!(g.value(y), &[10.0, 12.0, 11.0, 13.0]);
    }

    #[test]
    fn relu_kills_negatives() {
        let mut g = Graph::new();
        let x = vec_var(&mut g, &[-1.0, -0.5, -3.0], false);
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv1x1_identity() {
        let mut g = Graph::new();
        let xs: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = g.constant(vec![3, 2, 2], xs.clone()).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.constant(vec![3, 3], eye).unwrap();
        let b = g.constant(vec![3], vec![0.0; 3]).unwrap();
        let y = g.conv2d_1x1(x, w, b).unwrap();
        assert_eq!(g.value(y), xs.as_slice());
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = vec_var(&mut g, &[1.0, -2.0, 3.0, 0.5], true);
        let m = g.reduce_mean(x);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn squared_error_self_has_zero_gradient() {
        let mut g = Graph::new();
        let x = vec_var(&mut g, &[1.0, -2.0, 3.0], true);
        let l = g.squared_error(x, x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = vec_var(&mut g, &[1.0, 2.0], true);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Shape { op: "backward", .. })));
    }

    #[test]
    fn untracked_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = vec_var(&mut g, &[1.0, 2.0], true);
        let c = vec_var(&mut g, &[3.0, 4.0], false);
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn matmul_shape_error_names_extents() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn groups_must_divide_channels() {
        let mut g = Graph::new();
        let x = g.constant(vec![6, 1, 1], vec![0.0; 6]).unwrap();
        assert!(g.channel_shuffle(x, 4).is_err());
        assert!(g.channel_group_max(x, 4).is_err());
        assert!(g.channel_group_avg(x, 0).is_err());
    }

    #[test]
    fn group_max_tie_goes_to_lowest_channel() {
        let mut g = Graph::new();
        let x = g
            .input(&DiffTensor::new(vec![4, 1, 1], vec![2.0, 2.0, 1.0, 1.0]).unwrap().tracked());
        let m = g.channel_group_max(x, 2).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn apply_checks_arity() {
        let mut g = Graph::new();
        let x = vec_var(&mut g, &[1.0], false);
        assert!(g.apply(Primitive::MatMul, &[x]).is_err());
        let y = g.apply(Primitive::Scale(2.0), &[x]).unwrap();
        assert_eq!(g.value(y), &[2.0]);
    }

    #[test]
    fn bound_unused_params_get_zero_gradients() {
        let mut ps = ParamSet::new();
        ps.insert("used", DiffTensor::vector(vec![2.0]).unwrap()).unwrap();
        ps.insert("unused", DiffTensor::vector(vec![5.0, 6.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let b = g.bind(&ps);
        let u = b.get("used").unwrap();
        let sq = g.mul(u, u).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        grads.accumulate_into(&mut ps).unwrap();
        assert_eq!(ps.get("used").unwrap().grad().unwrap(), &[4.0]);
        assert_eq!(ps.get("unused").unwrap().grad().unwrap(), &[0.0, 0.0]);
        ps.sgd_step(0.5, 0.0).unwrap();
        assert_eq!(ps.get("used").unwrap().values(), &[0.0]);
    }
}
