//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order of the (acyclic) computation graph. [`Graph::backward`]
//! walks it once in reverse and leaves the accumulated gradient in each
//! node's `grad` buffer.

use rand::Rng;

use super::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalization uses batch statistics or stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Per-channel statistics observed by a training-mode batch norm.
///
/// `var` is the unbiased (n - 1) estimate, which is what the running
/// average tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Sparse local derivative of a custom op with respect to one input.
///
/// Input element `e` feeds output element `target[e]` with partial
/// derivative `deriv[e]`; `target[e] == NO_TARGET` means it feeds nothing.
#[derive(Debug, Clone)]
pub struct LocalGrad {
    pub input: Var,
    pub target: Vec<u32>,
    pub deriv: Vec<f64>,
}

pub const NO_TARGET: u32 = u32::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: NormMode,
    },
    LeakyRelu {
        input: Var,
        alpha: f64,
    },
    Sigmoid {
        input: Var,
    },
    Scale {
        input: Var,
        mask: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Upsample2x {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Permute {
        input: Var,
        source: Vec<u32>,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Sum {
        input: Var,
    },
    SumScalars {
        parts: Vec<Var>,
    },
    Custom {
        grads: Vec<LocalGrad>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ChannelBias { input, bias } => vec![*input, *bias],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::LeakyRelu { input, .. }
            | Op::Sigmoid { input }
            | Op::Scale { input, .. }
            | Op::Upsample2x { input }
            | Op::Reshape { input }
            | Op::Permute { input, .. }
            | Op::Sum { input } => vec![*input],
            Op::Add { a, b } | Op::Mul { a, b } | Op::ConcatChannels { a, b } => vec![*a, *b],
            Op::Dense { input, weights, bias } => vec![*input, *weights, *bias],
            Op::SumScalars { parts } => parts.clone(),
            Op::Custom { grads } => grads.iter().map(|g| g.input).collect(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward computation recorded for differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kink_signature: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_signature: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Hash of the sign pattern at every non-differentiable point the forward
    /// pass went through. Two evaluations with equal signatures took the same
    /// smooth branch everywhere.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    /// Records which side of a kink each element fell on.
    pub fn note_kinks(&mut self, sides: impl Iterator<Item = bool>) {
        let mut h = self.kink_signature;
        for s in sides {
            h ^= s as u64 + 1;
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.kink_signature = h;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let rg = self.needs(&op.inputs());
        self.push(value, op, rg)
    }

    /// 2-D convolution with zero padding. Accepts `[C, H, W]` or `[N, C, H, W]`
    /// inputs; the output has the same rank as the input.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be at least 1".into()));
        }
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (batch, c, h, w, batched) = match *xs.as_slice() {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d input must be [C,H,W] or [N,C,H,W], got {xs:?}"
                )))
            }
        };
        let &[o, kc, kh, kw] = ks.as_slice() else {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be [C_out,C_in,kH,kW], got {ks:?}"
            )));
        };
        if kc != c {
            return Err(Error::Dimension(format!(
                "conv2d kernel expects {kc} input channels, input has {c}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = ConvGeometry {
            batch,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: o,
            k_h: kh,
            k_w: kw,
            stride,
            pad,
        };
        let out = conv::forward(&geom, self.value(input).data(), self.value(kernel).data());
        let shape = if batched {
            vec![batch, o, geom.out_h(), geom.out_w()]
        } else {
            vec![o, geom.out_h(), geom.out_w()]
        };
        Ok(self.push_op(Tensor::from_parts(shape, out), Op::Conv2d { input, kernel, geom }))
    }

    /// Adds a per-channel bias to an `[N, C, H, W]` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (n, c, plane) = nchw(self.shape(input))?;
        if self.value(bias).len() != c {
            return Err(Error::Dimension(format!(
                "bias has {} entries for {c} channels",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(input).data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                for v in &mut out[(ni * c + ci) * plane..][..plane] {
                    *v += b[ci];
                }
            }
        }
        let shape = self.shape(input).to_vec();
        Ok(self.push_op(Tensor::from_parts(shape, out), Op::ChannelBias { input, bias }))
    }

    /// Training-mode batch normalization over the batch and spatial axes of
    /// an `[N, C, H, W]` tensor. Also returns the observed batch statistics.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("batch norm eps must be > 0, got {eps}")));
        }
        let (n, c, plane) = nchw(self.shape(input))?;
        self.check_channel_params(gamma, beta, c)?;
        let x = self.value(input).data();
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                for v in &x[(ni * c + ci) * plane..][..plane] {
                    s += v;
                }
            }
            let m = s / count;
            let mut ss = 0.0;
            for ni in 0..n {
                for v in &x[(ni * c + ci) * plane..][..plane] {
                    let d = v - m;
                    ss += d * d;
                }
            }
            mean[ci] = m;
            var[ci] = ss / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var
                .iter()
                .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                .collect(),
        };
        let out = self.normalize(input, gamma, beta, &mean, &inv_std, NormMode::Train);
        Ok((out, stats))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("batch norm eps must be > 0, got {eps}")));
        }
        let (_, c, _) = nchw(self.shape(input))?;
        self.check_channel_params(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension("running statistics length mismatch".into()));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.normalize(input, gamma, beta, running_mean, &inv_std, NormMode::Infer))
    }

    fn check_channel_params(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Parameter(format!(
                "gamma/beta lengths {}/{} do not match {c} channels",
                self.value(gamma).len(),
                self.value(beta).len()
            )));
        }
        Ok(())
    }

    fn normalize(&mut self, input: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64], mode: NormMode) -> Var {
        let shape = self.shape(input).to_vec();
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    let xh = (x[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = g[ci] * xh + b[ci];
                }
            }
        }
        self.push_op(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                mode,
            },
        )
    }

    pub fn leaky_relu(&mut self, input: Var, alpha: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Parameter(format!(
                "leaky relu slope must be in [0, 1), got {alpha}"
            )));
        }
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let out: Vec<f64> = x.data().iter().map(|&v| if v >= 0.0 { v } else { alpha * v }).collect();
        let sides: Vec<bool> = x.data().iter().map(|&v| v >= 0.0).collect();
        self.note_kinks(sides.into_iter());
        Ok(self.push_op(Tensor::from_parts(shape, out), Op::LeakyRelu { input, alpha }))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let out = x.data().iter().map(|&v| sigmoid(v)).collect();
        self.push_op(Tensor::from_parts(shape, out), Op::Sigmoid { input })
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`. A rate of zero is the identity.
    pub fn dropout<R: Rng>(&mut self, input: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.push_op(Tensor::from_parts(shape, out), Op::Scale { input, mask }))
    }

    /// Elementwise sum of two equally shaped tensors (residual connection).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(Tensor::from_parts(shape, out), Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(Tensor::from_parts(shape, out), Op::Mul { a, b }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Concatenates along the channel axis (`a`'s channels first). Accepts
    /// `[C, H, W]` or `[N, C, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (na, ca, pa, batched) = channel_layout(&sa)?;
        let (nb, cb, pb, _) = channel_layout(&sb)?;
        if sa.len() != sb.len() || na != nb || sa[sa.len() - 2..] != sb[sb.len() - 2..] {
            return Err(Error::Dimension(format!(
                "concat_channels: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        debug_assert_eq!(pa, pb);
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for ni in 0..na {
            out.extend_from_slice(&xa[ni * ca * pa..(ni + 1) * ca * pa]);
            out.extend_from_slice(&xb[ni * cb * pb..(ni + 1) * cb * pb]);
        }
        let mut shape = sa.clone();
        let ch_axis = if batched { 1 } else { 0 };
        shape[ch_axis] = ca + cb;
        Ok(self.push_op(Tensor::from_parts(shape, out), Op::ConcatChannels { a, b }))
    }

    /// Nearest-neighbour 2x upsampling of the last two axes.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(Error::Dimension(format!("upsample needs at least 2 axes, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len() * 4];
        for p in 0..planes {
            let src = &x[p * h * w..][..h * w];
            let dst = &mut out[p * 4 * h * w..][..4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = 2 * h;
        shape[r - 1] = 2 * w;
        Ok(self.push_op(Tensor::from_parts(shape, out), Op::Upsample2x { input }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).reshape(shape)?;
        Ok(self.push_op(t, Op::Reshape { input }))
    }

    /// Row-major vectorization into `[1, N]`.
    pub fn flatten(&mut self, input: Var) -> Var {
        let n = self.value(input).len();
        self.reshape(input, &[1, n]).expect("flatten preserves length")
    }

    /// Row-major vectorization of each batch item: `[B, ...]` to `[B, N]`.
    pub fn flatten_batch(&mut self, input: Var) -> Var {
        let s = self.shape(input);
        let b = s[0];
        let n = self.value(input).len() / b;
        self.reshape(input, &[b, n]).expect("flatten preserves length")
    }

    /// Rearranges a detection head from `[B, A*K, S, S]` to `[B, S, S, A, K]`.
    pub fn head_layout(&mut self, input: Var, anchors: usize, attrs: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let &[b, ch, gh, gw] = s.as_slice() else {
            return Err(Error::Dimension(format!("head must be [B,C,S,S], got {s:?}")));
        };
        if ch != anchors * attrs {
            return Err(Error::Dimension(format!(
                "head has {ch} channels, expected {anchors}x{attrs}"
            )));
        }
        let mut source = Vec::with_capacity(b * ch * gh * gw);
        for bi in 0..b {
            for y in 0..gh {
                for x in 0..gw {
                    for a in 0..anchors {
                        for k in 0..attrs {
                            source.push((((bi * ch + a * attrs + k) * gh + y) * gw + x) as u32);
                        }
                    }
                }
            }
        }
        let xs = self.value(input).data();
        let out = source.iter().map(|&i| xs[i as usize]).collect();
        Ok(self.push_op(
            Tensor::from_parts(vec![b, gh, gw, anchors, attrs], out),
            Op::Permute { input, source },
        ))
    }

    /// Fully connected layer with one output: `y[b] = x[b, :] . w + bias`
    /// with identity activation. `input` is `[B, N]`, `weights` `[1, N]`,
    /// `bias` a single value. Output is `[B, 1]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let &[b, n] = s.as_slice() else {
            return Err(Error::Dimension(format!("dense input must be [B,N], got {s:?}")));
        };
        if self.value(weights).len() != n {
            return Err(Error::Dimension(format!(
                "dense weights have {} entries for input length {n}",
                self.value(weights).len()
            )));
        }
        if self.value(bias).len() != 1 {
            return Err(Error::Dimension("dense bias must be a single value".into()));
        }
        let x = self.value(input).data();
        let w = self.value(weights).data();
        let bias_v = self.value(bias).data()[0];
        let out = (0..b)
            .map(|bi| {
                let mut acc = 0.0;
                for (xv, wv) in x[bi * n..(bi + 1) * n].iter().zip(w) {
                    acc += xv * wv;
                }
                acc + bias_v
            })
            .collect();
        Ok(self.push_op(Tensor::from_parts(vec![b, 1], out), Op::Dense { input, weights, bias }))
    }

    /// Sum of all elements, in storage order.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.push_op(Tensor::scalar(s), Op::Sum { input })
    }

    /// Sum of every element of every part, left to right, as a `[1]` scalar.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = 0.0;
        for p in parts {
            for v in self.value(*p).data() {
                acc += v;
            }
        }
        self.push_op(Tensor::scalar(acc), Op::SumScalars { parts: parts.to_vec() })
    }

    /// An op whose value was computed outside the engine, together with its
    /// sparse local derivatives.
    pub fn custom(&mut self, value: Tensor, grads: Vec<LocalGrad>) -> Result<Var> {
        for g in &grads {
            let len = self.value(g.input).len();
            if g.target.len() != len || g.deriv.len() != len {
                return Err(Error::Dimension(format!(
                    "custom op local gradient covers {} elements, input has {len}",
                    g.target.len()
                )));
            }
            if g.target.iter().any(|&t| t != NO_TARGET && t as usize >= value.len()) {
                return Err(Error::Dimension("custom op target out of range".into()));
            }
        }
        Ok(self.push_op(value, Op::Custom { grads }))
    }

    /// Reverse pass from a scalar root. Gradients land in each reachable
    /// node's `grad` buffer; earlier gradients are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &upstream, &mut grads);
            }
            self.nodes[idx].value.grad = Some(upstream);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(&contrib) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                if self.nodes[input.0].requires_grad {
                    send(*input, conv::backward_input(geom, up, self.value(*kernel).data()));
                }
                if self.nodes[kernel.0].requires_grad {
                    send(*kernel, conv::backward_kernel(geom, up, self.value(*input).data()));
                }
            }
            Op::ChannelBias { input, bias } => {
                let (n, c, plane) = nchw(self.shape(*input)).expect("checked in forward");
                let mut gb = vec![0.0; c];
                for ni in 0..n {
                    for (ci, g) in gb.iter_mut().enumerate() {
                        for v in &up[(ni * c + ci) * plane..][..plane] {
                            *g += v;
                        }
                    }
                }
                send(*input, up.to_vec());
                send(*bias, gb);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let (n, c, plane) = nchw(self.shape(*input)).expect("checked in forward");
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for i in base..base + plane {
                            dgamma[ci] += up[i] * xhat[i];
                            dbeta[ci] += up[i];
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; up.len()];
                    let m = (n * plane) as f64;
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let scale = g[ci] * inv_std[ci];
                            for i in base..base + plane {
                                dx[i] = match mode {
                                    NormMode::Infer => scale * up[i],
                                    NormMode::Train => scale / m * (m * up[i] - dbeta[ci] - xhat[i] * dgamma[ci]),
                                };
                            }
                        }
                    }
                    send(*input, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::LeakyRelu { input, alpha } => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(up)
                    .map(|(&v, &u)| if v >= 0.0 { u } else { alpha * u })
                    .collect();
                send(*input, dx);
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                let dx = y.iter().zip(up).map(|(&s, &u)| u * s * (1.0 - s)).collect();
                send(*input, dx);
            }
            Op::Scale { input, mask } => {
                send(*input, up.iter().zip(mask).map(|(u, m)| u * m).collect());
            }
            Op::Add { a, b } => {
                send(*a, up.to_vec());
                send(*b, up.to_vec());
            }
            Op::Mul { a, b } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, up.iter().zip(xb).map(|(u, y)| u * y).collect());
                send(*b, up.iter().zip(xa).map(|(u, x)| u * x).collect());
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, pa, _) = channel_layout(self.shape(*a)).expect("checked in forward");
                let (_, cb, pb, _) = channel_layout(self.shape(*b)).expect("checked in forward");
                let mut ga = Vec::with_capacity(n * ca * pa);
                let mut gb = Vec::with_capacity(n * cb * pb);
                let stride = ca * pa + cb * pb;
                for ni in 0..n {
                    let row = &up[ni * stride..(ni + 1) * stride];
                    ga.extend_from_slice(&row[..ca * pa]);
                    gb.extend_from_slice(&row[ca * pa..]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Upsample2x { input } => {
                let s = self.shape(*input);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = self.value(*input).len() / (h * w);
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let src = &up[p * 4 * h * w..][..4 * h * w];
                    let dst = &mut dx[p * h * w..][..h * w];
                    for y in 0..h {
                        for x in 0..w {
                            let r0 = 2 * y * 2 * w + 2 * x;
                            let r1 = r0 + 2 * w;
                            dst[y * w + x] = ((src[r0] + src[r0 + 1]) + src[r1]) + src[r1 + 1];
                        }
                    }
                }
                send(*input, dx);
            }
            Op::Reshape { input } => send(*input, up.to_vec()),
            Op::Permute { input, source } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (u, &s) in up.iter().zip(source) {
                    dx[s as usize] += u;
                }
                send(*input, dx);
            }
            Op::Dense { input, weights, bias } => {
                let x = self.value(*input).data();
                let w = self.value(*weights).data();
                let n = w.len();
                let b = up.len();
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; x.len()];
                    for bi in 0..b {
                        for (d, wv) in dx[bi * n..(bi + 1) * n].iter_mut().zip(w) {
                            *d = up[bi] * wv;
                        }
                    }
                    send(*input, dx);
                }
                let mut dw = vec![0.0; n];
                for bi in 0..b {
                    for (d, xv) in dw.iter_mut().zip(&x[bi * n..(bi + 1) * n]) {
                        *d += up[bi] * xv;
                    }
                }
                send(*weights, dw);
                let mut db = 0.0;
                for u in up {
                    db += u;
                }
                send(*bias, vec![db]);
            }
            Op::Sum { input } => {
                send(*input, vec![up[0]; self.value(*input).len()]);
            }
            Op::SumScalars { parts } => {
                for p in parts {
                    send(*p, vec![up[0]; self.value(*p).len()]);
                }
            }
            Op::Custom { grads: locals } => {
                for lg in locals {
                    let dx = lg
                        .target
                        .iter()
                        .zip(&lg.deriv)
                        .map(|(&t, &d)| if t == NO_TARGET { 0.0 } else { up[t as usize] * d })
                        .collect();
                    send(lg.input, dx);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn nchw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::Dimension(format!("expected [N,C,H,W], got {shape:?}"))),
    }
}

/// (batch, channels, plane, batched?) for `[C,H,W]` or `[N,C,H,W]`.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h * w, false)),
        [n, c, h, w] => Ok((n, c, h * w, true)),
        _ => Err(Error::Dimension(format!(
            "expected [C,H,W] or [N,C,H,W], got {shape:?}"
        ))),
    }
}
