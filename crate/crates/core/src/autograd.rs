//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends a node holding its output value and enough saved
//! state to run its backward rule. Node inputs always precede the node, so a
//! single reverse sweep visits each node after all of its consumers.

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalization statistics mode.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with frozen running mean and variance.
    Frozen { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics returned by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the convention used for running estimates.
    pub var: Vec<T>,
}

/// Row layout of a batched attention call: tokens of each sample are stacked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    lens: Vec<usize>,
    offsets: Vec<usize>,
}

impl Segments {
    pub fn new(lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            offsets.push(acc);
            acc += l;
        }
        Self { lens, offsets }
    }

    pub fn uniform(count: usize, len: usize) -> Self {
        Self::new(vec![len; count])
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    /// (offset, len) of sample `b`.
    pub fn span(&self, b: usize) -> (usize, usize) {
        (self.offsets[b], self.lens[b])
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    AddBroadcast(Var, Var),
    AddChannelBias(Var, Var),
    ScaleChannels(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    PowConst(Var, T),
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<Vec<T>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Upsample(Var, usize),
    Downsample(Var, usize),
    Embedding(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        qs: Segments,
        ks: Segments,
        heads: usize,
        probs: Vec<Vec<T>>,
    },
    SegmentMean(Var, Segments),
    WeightedNll {
        logp: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
    },
    Pick(Var, Vec<usize>),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Dynamic gradient graph, rebuilt for every forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const LN_CLAMP: f64 = 1e-12;

/// Tanh approximation of GELU, shared by the tape op and its reference checks.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + fast_tanh(u))
}

/// `tanh` through one exponential; absolute error stays at rounding level.
fn fast_tanh<T: Scalar>(u: T) -> T {
    if u.abs() > T::of(20.0) {
        return u.signum();
    }
    let e = (u + u).exp();
    (e - T::one()) / (e + T::one())
}

/// Derivative at `x` given the forward output `y`; the tanh term is
/// recovered from `y` away from zero.
fn gelu_grad<T: Scalar>(x: T, y: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let a = T::of(GELU_C);
    let t = if x.abs() > T::of(1e-3) {
        T::of(2.0) * y / x - T::one()
    } else {
        fast_tanh(c * (x + a * x * x * x))
    };
    T::of(0.5) * (T::one() + t)
        + T::of(0.5) * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

type Grads<T> = [Option<Vec<T>>];

fn grad_buf<'g, T: Scalar>(nodes: &[Node<T>], grads: &'g mut Grads<T>, v: Var) -> Option<&'g mut [T]> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Scalar>(nodes: &[Node<T>], grads: &mut Grads<T>, v: Var, g: &[T]) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        slot => *slot = Some(g.to_vec()),
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the tape so a fresh forward pass can be recorded.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        self.push_node(t, requires_grad, Op::Leaf)
    }

    /// Records a differentiable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_node(t, true, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_node(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Sign of every ReLU input on the tape, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(x) = n.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|v| *v > T::zero()));
            }
        }
        out
    }

    /// Head-wise attention probabilities recorded by [`Tape::attention`].
    ///
    /// Indexed `[sample * heads + head]`, each a row-major `[q_len × k_len]` matrix.
    pub fn attention_probs(&self, v: Var) -> Option<(&[Vec<T>], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, heads, .. } => Some((probs, *heads)),
            _ => None,
        }
    }

    fn push_node(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        if self.backward_done {
            return Err(TensorError::Usage(
                "tape already differentiated; reset before recording a new forward pass".into(),
            ));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, requires_grad, op))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(name, out, &[x], op)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, out, &[a, b], op)
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("rank 2 required, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out)?;
        self.push("transpose", out, &[x], Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        self.map("affine", x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    /// Adds `b`, tiled over the leading axes of `x`; `x`'s shape must end with `b`'s.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(TensorError::Dimension {
                op: "add_broadcast",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bd = self.data(b);
        let n = bd.len();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let out = Tensor::new(sx.to_vec(), data)?;
        self.push("add_broadcast", out, &[x, b], Op::AddBroadcast(x, b))
    }

    /// Adds a per-channel bias `[C]` to `x` of shape `[B×C×...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(TensorError::Dimension {
                op: "add_channel_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let c = sx[1];
        let spatial: usize = sx[2..].iter().product();
        let bd = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / spatial) % c])
            .collect();
        let out = Tensor::new(sx.to_vec(), data)?;
        self.push("add_channel_bias", out, &[x, b], Op::AddChannelBias(x, b))
    }

    /// Scales `x [B×C×...]` by a per-sample, per-channel gate `g [B×C]`.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(g));
        if sx.len() < 2 || sg != [sx[0], sx[1]] {
            return Err(TensorError::Dimension {
                op: "scale_channels",
                lhs: sx.to_vec(),
                rhs: sg.to_vec(),
            });
        }
        let spatial: usize = sx[2..].iter().product();
        let gd = self.data(g);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gd[i / spatial])
            .collect();
        let out = Tensor::new(sx.to_vec(), data)?;
        self.push("scale_channels", out, &[x, g], Op::ScaleChannels(x, g))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, gelu_scalar, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, |v| v.exp(), Op::Exp(x))
    }

    /// Natural log with the argument clamped below at 1e-12.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.map("ln", x, |v| v.max(T::of(LN_CLAMP)).ln(), Op::Ln(x))
    }

    /// `x^p` for non-negative `x`.
    pub fn pow_const(&mut self, x: Var, p: T) -> Result<Var> {
        if self.data(x).iter().any(|&v| v < T::zero()) {
            return Err(TensorError::Usage("pow_const requires non-negative input".into()));
        }
        self.map("pow_const", x, |v| v.powf(p), Op::PowConst(x, p))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if d == 0 {
            return Err(shape_err("softmax", "empty last dimension"));
        }
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for (row, o) in src.chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(row, o);
        }
        let out = Tensor::new(s, out)?;
        self.push("softmax", out, &[x], Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if d == 0 {
            return Err(shape_err("log_softmax", "empty last dimension"));
        }
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for (row, o) in src.chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (oo, &v) in o.iter_mut().zip(row) {
                *oo = v - lse;
            }
        }
        let out = Tensor::new(s, out)?;
        self.push("log_softmax", out, &[x], Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.data(x).iter().copied().sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::SumAll(x))
    }

    /// Mean over `axis`, dropping it (a rank-1 input reduces to shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("mean_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = outer_inner(&s, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::of_usize(len);
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape: Vec<usize> = s[..axis].iter().chain(&s[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, out)?;
        self.push("mean_axis", out, &[x], Op::MeanAxis { x, outer, len, inner })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, &[x], Op::Reshape(x))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("invalid permutation {perm:?} for {s:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let src = self.data(x);
        let out = permute_data(src, &s, perm);
        let out = Tensor::new(out_shape, out)?;
        self.push("permute", out, &[x], Op::Permute(x, perm.to_vec()))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, axis_len, inner) = outer_inner(&s, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        self.push(
            "narrow",
            out,
            &[x],
            Op::Narrow {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = outer_inner(&s0, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &l) in xs.iter().zip(&lens) {
                let src = self.data(x);
                out.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        self.push(
            "concat",
            out,
            xs,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                lens,
                inner,
            },
        )
    }

    /// 2-D cross-correlation of `x [B×C×H×W]` with `kernel [O×C×k×k]`, k ∈ {1, 3}.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sk[1] != sx[1] || sk[2] != sk[3] {
            return Err(TensorError::Dimension {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let k = sk[2];
        if k != 1 && k != 3 {
            return Err(shape_err("conv2d", format!("kernel size {k} unsupported; use 1 or 3")));
        }
        if stride == 0 || sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return Err(shape_err("conv2d", "stride must be positive and kernel fit the padded input"));
        }
        let g = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sk[0],
            k,
            stride,
            pad,
            h_out: (sx[2] + 2 * pad - k) / stride + 1,
            w_out: (sx[3] + 2 * pad - k) / stride + 1,
        };
        let xd = self.data(x);
        let kd = self.data(kernel);
        let in_sz = g.c_in * g.h * g.w;
        let hw_out = g.h_out * g.w_out;
        let ckk = g.c_in * k * k;
        let mut out = vec![T::zero(); g.batch * g.c_out * hw_out];
        let mut all_cols = Vec::with_capacity(g.batch);
        for b in 0..g.batch {
            let cols = im2col(&xd[b * in_sz..(b + 1) * in_sz], &g);
            gemm_acc(
                kd,
                &cols,
                &mut out[b * g.c_out * hw_out..(b + 1) * g.c_out * hw_out],
                g.c_out,
                ckk,
                hw_out,
            );
            all_cols.push(cols);
        }
        let out = Tensor::new(vec![g.batch, g.c_out, g.h_out, g.w_out], out)?;
        self.push(
            "conv2d",
            out,
            &[x, kernel],
            Op::Conv2d {
                x,
                kernel,
                geom: g,
                cols: all_cols,
            },
        )
    }

    /// Batch normalization over all axes but the channel axis of `x [B×C×...]`.
    ///
    /// In batch mode the returned statistics feed the caller's running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(TensorError::Dimension {
                op: "batch_norm",
                lhs: sx,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (b, c) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        let n = b * spatial;
        let xd = self.data(x);
        let (mean, var_biased, stats) = match mode {
            BnMode::Batch => {
                if n < 2 {
                    return Err(shape_err("batch_norm", "batch statistics need at least 2 values per channel"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        mean[ci] = mean[ci] + xd[base..base + spatial].iter().copied().sum::<T>();
                    }
                }
                let inv_n = T::one() / T::of_usize(n);
                mean.iter_mut().for_each(|m| *m = *m * inv_n);
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        for &v in &xd[base..base + spatial] {
                            let d = v - mean[ci];
                            var[ci] = var[ci] + d * d;
                        }
                    }
                }
                let unbiased = var
                    .iter()
                    .map(|&v| v / T::of_usize(n - 1))
                    .collect::<Vec<_>>();
                var.iter_mut().for_each(|v| *v = *v * inv_n);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Frozen { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", "running statistics length differs from channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (i, (&v, (xh, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ci = (i / spatial) % c;
            *xh = (v - mean[ci]) * inv_std[ci];
            *o = gd[ci] * *xh + bd[ci];
        }
        let out = Tensor::new(sx, out)?;
        let var = self.push(
            "batch_norm",
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: stats.is_some(),
            },
        )?;
        Ok((var, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        let inv_d = T::one() / T::of_usize(d);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        let out = Tensor::new(sx, out)?;
        self.push(
            "layer_norm",
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Nearest-neighbour upsampling of the trailing two axes by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || factor == 0 {
            return Err(shape_err("upsample_nearest", format!("rank >= 2 and factor > 0 required, got {s:?}")));
        }
        let r = s.len();
        let (h, w) = (s[r - 2], s[r - 1]);
        let (ho, wo) = (h * factor, w * factor);
        let lead: usize = s[..r - 2].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(lead * ho * wo);
        for l in 0..lead {
            for i in 0..ho {
                let row = &src[l * h * w + (i / factor) * w..][..w];
                for j in 0..wo {
                    out.push(row[j / factor]);
                }
            }
        }
        let mut shape = s[..r - 2].to_vec();
        shape.extend([ho, wo]);
        let out = Tensor::new(shape, out)?;
        self.push("upsample_nearest", out, &[x], Op::Upsample(x, factor))
    }

    /// Nearest-neighbour downsampling: output `(i, j)` reads input `(i*f, j*f)`.
    pub fn downsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let r = s.len();
        if r < 2 || factor == 0 || !s[r - 2].is_multiple_of(factor) || !s[r - 1].is_multiple_of(factor) {
            return Err(shape_err(
                "downsample_nearest",
                format!("spatial extents of {s:?} must be divisible by {factor}"),
            ));
        }
        let (h, w) = (s[r - 2], s[r - 1]);
        let (ho, wo) = (h / factor, w / factor);
        let lead: usize = s[..r - 2].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(lead * ho * wo);
        for l in 0..lead {
            for i in 0..ho {
                for j in 0..wo {
                    out.push(src[l * h * w + i * factor * w + j * factor]);
                }
            }
        }
        let mut shape = s[..r - 2].to_vec();
        shape.extend([ho, wo]);
        let out = Tensor::new(shape, out)?;
        self.push("downsample_nearest", out, &[x], Op::Downsample(x, factor))
    }

    /// Nearest resize of a constant (mask) tensor; refuses gradient-carrying inputs.
    pub fn nearest_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if self.requires_grad(x) {
            return Err(TensorError::Usage(
                "nearest_resize is only legal on tensors that carry no gradient".into(),
            ));
        }
        let out = self.value(x).nearest_resize(out_h, out_w)?;
        Ok(self.constant(out))
    }

    /// Gathers rows of `table [V×D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(shape_err("embedding", "rank-2 table and at least one id required"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::Usage(format!("token id {bad} outside vocabulary of {}", s[0])));
        }
        let d = s[1];
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        self.push("embedding", out, &[table], Op::Embedding(table, ids.to_vec()))
    }

    /// Multi-head scaled dot-product attention over stacked samples.
    ///
    /// `q [ΣLq × d]` attends to `k, v [ΣLk × d]` within each sample; heads split
    /// the feature axis into `heads` blocks of `d / heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        qs: &Segments,
        ks: &Segments,
        heads: usize,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(TensorError::Dimension {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let d = sq[1];
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("width {d} not divisible by {heads} heads")));
        }
        if qs.len() != ks.len() || qs.total() != sq[0] || ks.total() != sk[0] || qs.lens.contains(&0) || ks.lens.contains(&0) {
            return Err(shape_err("attention", "segment layout does not match stacked rows"));
        }
        let dh = d / heads;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::zero(); sq[0] * d];
        let mut probs = Vec::with_capacity(qs.len() * heads);
        for b in 0..qs.len() {
            let (qo, lq) = qs.span(b);
            let (ko, lk) = ks.span(b);
            for h in 0..heads {
                let qh = gather_block(qd, d, qo, lq, h * dh, dh);
                let kh = gather_block(kd, d, ko, lk, h * dh, dh);
                let vh = gather_block(vd, d, ko, lk, h * dh, dh);
                let mut scores = vec![T::zero(); lq * lk];
                gemm_nt_acc(&qh, &kh, &mut scores, lq, dh, lk);
                scores.iter_mut().for_each(|s| *s = *s * scale);
                let mut a = vec![T::zero(); lq * lk];
                for (row, o) in scores.chunks(lk).zip(a.chunks_mut(lk)) {
                    softmax_row(row, o);
                }
                let mut oh = vec![T::zero(); lq * dh];
                gemm_acc(&a, &vh, &mut oh, lq, lk, dh);
                scatter_block(&mut out, d, qo, lq, h * dh, dh, &oh);
                probs.push(a);
            }
        }
        let out = Tensor::new(vec![sq[0], d], out)?;
        self.push(
            "attention",
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                qs: qs.clone(),
                ks: ks.clone(),
                heads,
                probs,
            },
        )
    }

    /// Mean over the rows of each sample: `[ΣL × D] → [B × D]`.
    pub fn segment_mean(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || segs.total() != s[0] || segs.lens.contains(&0) {
            return Err(shape_err("segment_mean", format!("segments do not tile {s:?}")));
        }
        let d = s[1];
        let src = self.data(x);
        let mut out = vec![T::zero(); segs.len() * d];
        for b in 0..segs.len() {
            let (o, l) = segs.span(b);
            let inv = T::one() / T::of_usize(l);
            for r in o..o + l {
                for j in 0..d {
                    out[b * d + j] = out[b * d + j] + src[r * d + j];
                }
            }
            out[b * d..(b + 1) * d].iter_mut().for_each(|v| *v = *v * inv);
        }
        let out = Tensor::new(vec![segs.len(), d], out)?;
        self.push("segment_mean", out, &[x], Op::SegmentMean(x, segs.clone()))
    }

    /// `-Σᵢ wᵢ · logp[i, targetᵢ]` with constant weights.
    pub fn weighted_nll(&mut self, logp: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let s = self.shape(logp).to_vec();
        if s.len() != 2 || targets.len() != s[0] || weights.len() != s[0] {
            return Err(shape_err("weighted_nll", format!("{} targets / {} weights for {s:?}", targets.len(), weights.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= s[1]) {
            return Err(TensorError::Usage(format!("target class {bad} outside {} classes", s[1])));
        }
        let src = self.data(logp);
        let total = targets
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&t, &w))| -w * src[i * s[1] + t])
            .sum();
        self.push(
            "weighted_nll",
            Tensor::scalar(total),
            &[logp],
            Op::WeightedNll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Selects `x[i, idx[i]]` from each row of `x [n×K]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.len() != s[0] || idx.iter().any(|&i| i >= s[1]) {
            return Err(shape_err("pick", format!("{} indices for {s:?}", idx.len())));
        }
        let src = self.data(x);
        let out = idx.iter().enumerate().map(|(i, &j)| src[i * s[1] + j]).collect();
        let out = Tensor::new(vec![s[0]], out)?;
        self.push("pick", out, &[x], Op::Pick(x, idx.to_vec()))
    }

    /// Populates `dLoss/dNode` for every node that requires grad.
    ///
    /// Allowed once per recorded forward pass; call [`Tape::reset`] before reuse.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Usage("backward already ran on this tape; reset first".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else { continue };
            backprop(&node.op, &node.value, g, &self.nodes, before);
        }
        for (n, g) in self.nodes.iter_mut().zip(grads) {
            n.grad = g;
        }
        Ok(())
    }
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let r = shape.len();
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; r];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(a, b)| a * b).sum();
        out.push(src[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.h_out * g.w_out;
    let mut cols = vec![T::zero(); g.c_in * g.k * g.k * hw];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src_row = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[oi * g.w_out + oj] = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.h_out * g.w_out;
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dx[base + jj as usize] = dx[base + jj as usize] + src[oi * g.w_out + oj];
                        }
                    }
                }
            }
        }
    }
}

fn gather_block<T: Scalar>(src: &[T], d: usize, row0: usize, rows: usize, col0: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in row0..row0 + rows {
        out.extend_from_slice(&src[r * d + col0..r * d + col0 + cols]);
    }
    out
}

fn scatter_block<T: Scalar>(dst: &mut [T], d: usize, row0: usize, rows: usize, col0: usize, cols: usize, src: &[T]) {
    for r in 0..rows {
        let o = (row0 + r) * d + col0;
        for c in 0..cols {
            dst[o + c] = dst[o + c] + src[r * cols + c];
        }
    }
}

fn backprop<T: Scalar>(op: &Op<T>, out: &Tensor<T>, g: &[T], nodes: &[Node<T>], grads: &mut Grads<T>) {
    let y = out.data();
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            if nodes[a.0].requires_grad {
                let bv = nodes[b.0].value.data();
                let da = grad_buf(nodes, grads, *a).expect("requires grad");
                gemm_nt_acc(g, bv, da, m, n, k);
            }
            if nodes[b.0].requires_grad {
                let av = nodes[a.0].value.data();
                let db = grad_buf(nodes, grads, *b).expect("requires grad");
                gemm_tn_acc(av, g, db, m, k, n);
            }
        }
        Op::Transpose(x) => {
            let s = out.shape();
            let (r, c) = (s[0], s[1]);
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = dx[j * r + i] + g[i * c + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, g);
            add_into(nodes, grads, *b, g);
        }
        Op::Sub(a, b) => {
            add_into(nodes, grads, *a, g);
            if let Some(db) = grad_buf(nodes, grads, *b) {
                db.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d - gv);
            }
        }
        Op::Mul(a, b) => {
            if nodes[a.0].requires_grad {
                let bv = nodes[b.0].value.data();
                let da = grad_buf(nodes, grads, *a).expect("requires grad");
                for ((d, &gv), &bb) in da.iter_mut().zip(g).zip(bv) {
                    *d = *d + gv * bb;
                }
            }
            if nodes[b.0].requires_grad {
                let av = nodes[a.0].value.data();
                let db = grad_buf(nodes, grads, *b).expect("requires grad");
                for ((d, &gv), &aa) in db.iter_mut().zip(g).zip(av) {
                    *d = *d + gv * aa;
                }
            }
        }
        Op::Affine(x, s) => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * *s);
            }
        }
        Op::AddBroadcast(x, b) => {
            add_into(nodes, grads, *x, g);
            if let Some(db) = grad_buf(nodes, grads, *b) {
                let n = db.len();
                for (i, &gv) in g.iter().enumerate() {
                    db[i % n] = db[i % n] + gv;
                }
            }
        }
        Op::AddChannelBias(x, b) => {
            add_into(nodes, grads, *x, g);
            let s = out.shape();
            let c = s[1];
            let spatial: usize = s[2..].iter().product();
            if let Some(db) = grad_buf(nodes, grads, *b) {
                for (i, &gv) in g.iter().enumerate() {
                    let ci = (i / spatial) % c;
                    db[ci] = db[ci] + gv;
                }
            }
        }
        Op::ScaleChannels(x, gate) => {
            let spatial: usize = out.shape()[2..].iter().product();
            if nodes[x.0].requires_grad {
                let gv = nodes[gate.0].value.data();
                let dx = grad_buf(nodes, grads, *x).expect("requires grad");
                for (i, (d, &gg)) in dx.iter_mut().zip(g).enumerate() {
                    *d = *d + gg * gv[i / spatial];
                }
            }
            if nodes[gate.0].requires_grad {
                let xv = nodes[x.0].value.data();
                let dg = grad_buf(nodes, grads, *gate).expect("requires grad");
                for (i, (&gg, &xx)) in g.iter().zip(xv).enumerate() {
                    dg[i / spatial] = dg[i / spatial] + gg * xx;
                }
            }
        }
        Op::Relu(x) => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    if yv > T::zero() {
                        *d = *d + gv;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[x.0].value.data();
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for (((d, &gv), &xx), &yy) in dx.iter_mut().zip(g).zip(xv).zip(y) {
                    *d = *d + gv * gelu_grad(xx, yy);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    *d = *d + gv * yv * (T::one() - yv);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    *d = *d + gv * (T::one() - yv * yv);
                }
            }
        }
        Op::Exp(x) => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    *d = *d + gv * yv;
                }
            }
        }
        Op::Ln(x) => {
            let xv = nodes[x.0].value.data();
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for ((d, &gv), &xx) in dx.iter_mut().zip(g).zip(xv) {
                    if xx > T::of(LN_CLAMP) {
                        *d = *d + gv / xx;
                    }
                }
            }
        }
        Op::PowConst(x, p) => {
            let xv = nodes[x.0].value.data();
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for ((d, &gv), &xx) in dx.iter_mut().zip(g).zip(xv) {
                    if *p == T::zero() {
                        continue;
                    }
                    *d = *d + gv * *p * xx.powf(*p - T::one());
                }
            }
        }
        Op::Softmax(x) => {
            let dlen = *out.shape().last().expect("rank >= 1");
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for ((yr, gr), dr) in y.chunks(dlen).zip(g.chunks(dlen)).zip(dx.chunks_mut(dlen)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = *d + yv * (gv - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let dlen = *out.shape().last().expect("rank >= 1");
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for ((yr, gr), dr) in y.chunks(dlen).zip(g.chunks(dlen)).zip(dx.chunks_mut(dlen)) {
                    let gsum: T = gr.iter().copied().sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = *d + gv - yv.exp() * gsum;
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::MeanAxis { x, outer, len, inner } => {
            let inv = T::one() / T::of_usize(*len);
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for o in 0..*outer {
                    for a in 0..*len {
                        for i in 0..*inner {
                            let idx = (o * len + a) * inner + i;
                            dx[idx] = dx[idx] + g[o * inner + i] * inv;
                        }
                    }
                }
            }
        }
        Op::Reshape(x) => add_into(nodes, grads, *x, g),
        Op::Permute(x, perm) => {
            let inv = inverse_perm(perm);
            let back = permute_data(g, out.shape(), &inv);
            add_into(nodes, grads, *x, &back);
        }
        Op::Narrow {
            x,
            outer,
            axis_len,
            inner,
            start,
            len,
        } => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for o in 0..*outer {
                    let base = (o * axis_len + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &gv) in dx[base..base + len * inner].iter_mut().zip(src) {
                        *d = *d + gv;
                    }
                }
            }
        }
        Op::Concat {
            xs,
            outer,
            lens,
            inner,
        } => {
            let total: usize = lens.iter().sum();
            let mut off = 0;
            for (&x, &l) in xs.iter().zip(lens) {
                if let Some(dx) = grad_buf(nodes, grads, x) {
                    for o in 0..*outer {
                        let src = &g[(o * total + off) * inner..(o * total + off + l) * inner];
                        for (d, &gv) in dx[o * l * inner..(o + 1) * l * inner].iter_mut().zip(src) {
                            *d = *d + gv;
                        }
                    }
                }
                off += l;
            }
        }
        Op::Conv2d {
            x,
            kernel,
            geom,
            cols,
        } => {
            let hw = geom.h_out * geom.w_out;
            let ckk = geom.c_in * geom.k * geom.k;
            let per_out = geom.c_out * hw;
            if nodes[kernel.0].requires_grad {
                let dk = grad_buf(nodes, grads, *kernel).expect("requires grad");
                for (b, c) in cols.iter().enumerate() {
                    gemm_nt_acc(&g[b * per_out..(b + 1) * per_out], c, dk, geom.c_out, hw, ckk);
                }
            }
            if nodes[x.0].requires_grad {
                let kv = nodes[kernel.0].value.data();
                let in_sz = geom.c_in * geom.h * geom.w;
                let dx = grad_buf(nodes, grads, *x).expect("requires grad");
                let mut dcols = vec![T::zero(); ckk * hw];
                for b in 0..geom.batch {
                    dcols.iter_mut().for_each(|v| *v = T::zero());
                    gemm_tn_acc(kv, &g[b * per_out..(b + 1) * per_out], &mut dcols, geom.c_out, ckk, hw);
                    col2im_acc(&dcols, geom, &mut dx[b * in_sz..(b + 1) * in_sz]);
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let s = out.shape();
            let c = s[1];
            let spatial: usize = s[2..].iter().product();
            let n = T::of_usize(s[0] * spatial);
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                let ci = (i / spatial) % c;
                sum_g[ci] = sum_g[ci] + gv;
                sum_gx[ci] = sum_gx[ci] + gv * xh;
            }
            let gam = nodes[gamma.0].value.data();
            add_into(nodes, grads, *beta, &sum_g);
            add_into(nodes, grads, *gamma, &sum_gx);
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for (i, (d, (&gv, &xh))) in dx.iter_mut().zip(g.iter().zip(xhat)).enumerate() {
                    let ci = (i / spatial) % c;
                    let scale = gam[ci] * inv_std[ci];
                    if *batch_stats {
                        *d = *d + scale / n * (n * gv - sum_g[ci] - xh * sum_gx[ci]);
                    } else {
                        *d = *d + scale * gv;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let dlen = *out.shape().last().expect("rank >= 1");
            let gam = nodes[gamma.0].value.data();
            let mut dgam = vec![T::zero(); dlen];
            let mut dbeta = vec![T::zero(); dlen];
            for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                dgam[i % dlen] = dgam[i % dlen] + gv * xh;
                dbeta[i % dlen] = dbeta[i % dlen] + gv;
            }
            add_into(nodes, grads, *gamma, &dgam);
            add_into(nodes, grads, *beta, &dbeta);
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                let dn = T::of_usize(dlen);
                for (r, is) in inv_std.iter().enumerate() {
                    let row = r * dlen..(r + 1) * dlen;
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in row.clone() {
                        let dxh = g[j] * gam[j - r * dlen];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * xhat[j];
                    }
                    for j in row {
                        let dxh = g[j] * gam[j - r * dlen];
                        dx[j] = dx[j] + *is / dn * (dn * dxh - s1 - xhat[j] * s2);
                    }
                }
            }
        }
        Op::Upsample(x, f) => {
            let s = out.shape();
            let r = s.len();
            let (ho, wo) = (s[r - 2], s[r - 1]);
            let (h, w) = (ho / f, wo / f);
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                let lead = dx.len() / (h * w);
                for l in 0..lead {
                    for i in 0..ho {
                        for j in 0..wo {
                            let t = l * h * w + (i / f) * w + j / f;
                            dx[t] = dx[t] + g[l * ho * wo + i * wo + j];
                        }
                    }
                }
            }
        }
        Op::Downsample(x, f) => {
            let s = out.shape();
            let r = s.len();
            let (ho, wo) = (s[r - 2], s[r - 1]);
            let (h, w) = (ho * f, wo * f);
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                let lead = dx.len() / (h * w);
                for l in 0..lead {
                    for i in 0..ho {
                        for j in 0..wo {
                            let t = l * h * w + i * f * w + j * f;
                            dx[t] = dx[t] + g[l * ho * wo + i * wo + j];
                        }
                    }
                }
            }
        }
        Op::Embedding(table, ids) => {
            let d = out.shape()[1];
            if let Some(dt) = grad_buf(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            qs,
            ks,
            heads,
            probs,
        } => {
            let d = out.shape()[1];
            let dh = d / heads;
            let scale = T::one() / T::of_usize(dh).sqrt();
            let qd = nodes[q.0].value.data();
            let kd = nodes[k.0].value.data();
            let vd = nodes[v.0].value.data();
            let mut dq = vec![T::zero(); qd.len()];
            let mut dk = vec![T::zero(); kd.len()];
            let mut dv = vec![T::zero(); vd.len()];
            for b in 0..qs.len() {
                let (qo, lq) = qs.span(b);
                let (ko, lk) = ks.span(b);
                for h in 0..*heads {
                    let a = &probs[b * heads + h];
                    let qh = gather_block(qd, d, qo, lq, h * dh, dh);
                    let kh = gather_block(kd, d, ko, lk, h * dh, dh);
                    let vh = gather_block(vd, d, ko, lk, h * dh, dh);
                    let go = gather_block(g, d, qo, lq, h * dh, dh);
                    let mut dvh = vec![T::zero(); lk * dh];
                    gemm_tn_acc(a, &go, &mut dvh, lq, lk, dh);
                    let mut da = vec![T::zero(); lq * lk];
                    gemm_nt_acc(&go, &vh, &mut da, lq, dh, lk);
                    let mut ds = vec![T::zero(); lq * lk];
                    for r in 0..lq {
                        let ar = &a[r * lk..(r + 1) * lk];
                        let dar = &da[r * lk..(r + 1) * lk];
                        let dot: T = ar.iter().zip(dar).map(|(&x, &y)| x * y).sum();
                        for c in 0..lk {
                            ds[r * lk + c] = ar[c] * (dar[c] - dot) * scale;
                        }
                    }
                    let mut dqh = vec![T::zero(); lq * dh];
                    gemm_acc(&ds, &kh, &mut dqh, lq, lk, dh);
                    let mut dkh = vec![T::zero(); lk * dh];
                    gemm_tn_acc(&ds, &qh, &mut dkh, lq, lk, dh);
                    scatter_block(&mut dq, d, qo, lq, h * dh, dh, &dqh);
                    scatter_block(&mut dk, d, ko, lk, h * dh, dh, &dkh);
                    scatter_block(&mut dv, d, ko, lk, h * dh, dh, &dvh);
                }
            }
            add_into(nodes, grads, *q, &dq);
            add_into(nodes, grads, *k, &dk);
            add_into(nodes, grads, *v, &dv);
        }
        Op::SegmentMean(x, segs) => {
            let d = out.shape()[1];
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for b in 0..segs.len() {
                    let (o, l) = segs.span(b);
                    let inv = T::one() / T::of_usize(l);
                    for r in o..o + l {
                        for j in 0..d {
                            dx[r * d + j] = dx[r * d + j] + g[b * d + j] * inv;
                        }
                    }
                }
            }
        }
        Op::WeightedNll {
            logp,
            targets,
            weights,
        } => {
            if let Some(dl) = grad_buf(nodes, grads, *logp) {
                let k = dl.len() / targets.len();
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    dl[i * k + t] = dl[i * k + t] - w * g[0];
                }
            }
        }
        Op::Pick(x, idx) => {
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                let k = dx.len() / idx.len();
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * k + j] = dx[i * k + j] + g[i];
                }
            }
        }
    }
}
