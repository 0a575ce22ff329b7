//! Paired forward evaluation for central differences.
//!
//! `K` coordinates are perturbed per pass. Every activation element keeps
//! its value from the recorded forward pass (the baseline) and carries, for
//! each coordinate, the offset of its value at `theta - h` from the baseline
//! and the difference between its values at `theta + h` and `theta - h`.
//! Nonlinear operations see `baseline + offset`, so every pass linearizes
//! around exactly the values the backward pass used. Offsets and differences
//! are updated in forms that do not cancel (`expm1` for exponentials,
//! factored squares, divided batch statistics), so the loss difference keeps
//! full relative precision even for very small steps.

use crate::architecture::{LayerSpec, ParamOwner, ShapedNetModel, ANCHORS_PER_HEAD, BACKBONE_END};
use crate::engine::{sigmoid, NormMode};
use crate::loss::{BfLossMode, GridTarget, LossWeights};
use crate::tensor::Tensor;

/// Coordinates evaluated per pass.
pub(super) const K: usize = 16;
const N: usize = 2 * K;
/// Lanes `0..K` hold offsets at `theta - h`, lanes `K..N` the differences.
type Lanes = [f64; N];
type Half = [f64; K];

#[derive(Debug, Clone)]
struct Act {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<Lanes>,
}

impl Act {
    fn zeros(c: usize, batch: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            v: vec![[0.0; N]; c * batch * h * w],
        }
    }

    fn like(t: &Tensor) -> Self {
        let s = t.shape();
        Self::zeros(s[1], s[0], s[2], s[3])
    }
}

/// `[B, C, H, W]` values in channel-major `[C, B, H, W]` order.
fn channel_major(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(t.len());
    for ci in 0..c {
        for bi in 0..b {
            out.extend_from_slice(&t.data()[(bi * c + ci) * plane..][..plane]);
        }
    }
    out
}

/// Per-channel scale and shift: the baseline scale, and per coordinate the
/// offset at `theta - h` and the difference.
#[derive(Debug, Clone)]
struct ChannelLanes {
    scale: Vec<f64>,
    scale_off: Vec<Half>,
    scale_d: Vec<Half>,
    shift_off: Vec<Half>,
    shift_d: Vec<Half>,
}

impl ChannelLanes {
    fn constant(scale: &[f64], shift: &[f64]) -> Self {
        Self {
            scale: scale.to_vec(),
            scale_off: vec![[0.0; K]; scale.len()],
            scale_d: vec![[0.0; K]; scale.len()],
            shift_off: vec![[0.0; K]; shift.len()],
            shift_d: vec![[0.0; K]; shift.len()],
        }
    }
}

/// Baseline normalization statistics per channel.
#[derive(Debug, Clone)]
struct NormStats {
    mean: Vec<f64>,
    /// Batch variance; unused for stored statistics.
    var: Vec<f64>,
    inv_std: Vec<f64>,
    /// Whether the statistics come from the batch (and so move with it).
    batch: bool,
}

#[derive(Debug, Clone)]
enum Finish {
    /// Batch normalization followed by leaky ReLU. `normalized` holds the
    /// baseline values between the two.
    Norm {
        params: ChannelLanes,
        stats: NormStats,
        normalized: Vec<f64>,
    },
    Bias(ChannelLanes),
}

#[derive(Debug, Clone)]
struct ConvLayer {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    /// Output channel count rounded up to a multiple of [`BLOCK`].
    out_pad: usize,
    /// `[(c * k + ky) * k + kx][out_pad]`, zero beyond `out_c`.
    packed: Vec<f64>,
    /// Baseline conv output before normalization or bias, channel-major.
    raw: Vec<f64>,
    finish: Finish,
}

/// Which kind of tensor a parameter is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// Parameter tensor locations in the order of [`ShapedNetModel::params`].
pub(super) fn param_kinds(model: &ShapedNetModel) -> Vec<(ParamOwner, ParamKind)> {
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        if let Some(c) = &layer.conv {
            out.push((ParamOwner::Layer(i), ParamKind::Weight));
            if c.bias.is_some() {
                out.push((ParamOwner::Layer(i), ParamKind::Bias));
            }
            if c.bn.is_some() {
                out.push((ParamOwner::Layer(i), ParamKind::Gamma));
                out.push((ParamOwner::Layer(i), ParamKind::Beta));
            }
        }
    }
    if model.regression.is_some() {
        out.push((ParamOwner::Regression, ParamKind::Weight));
        out.push((ParamOwner::Regression, ParamKind::Bias));
    }
    out
}

/// Batch statistics in the same summation order as the graph.
fn batch_stats(raw: &[f64], c: usize, eps: f64) -> NormStats {
    let per = raw.len() / c;
    let count = per as f64;
    let mut stats = NormStats {
        mean: vec![0.0; c],
        var: vec![0.0; c],
        inv_std: vec![0.0; c],
        batch: true,
    };
    for (ci, block) in raw.chunks(per).enumerate() {
        let m = block.iter().fold(0.0, |s, v| s + v) / count;
        let ss = block.iter().fold(0.0, |s, v| s + (v - m) * (v - m));
        stats.mean[ci] = m;
        stats.var[ci] = ss / count;
        stats.inv_std[ci] = 1.0 / (stats.var[ci] + eps).sqrt();
    }
    stats
}

pub(super) struct PairedEvaluator<'a> {
    model: &'a ShapedNetModel,
    target: &'a GridTarget,
    weights: LossWeights,
    mode: BfLossMode,
    batch: usize,
    isa: Isa,
    convs: Vec<Option<ConvLayer>>,
    /// Baseline input of each conv layer, `[B, C, H, W]`.
    conv_inputs: Vec<Option<Tensor>>,
    /// Baseline layer outputs, channel-major.
    base: Vec<Vec<f64>>,
    clean: Vec<Act>,
    work: Vec<Act>,
    dirty: Vec<Vec<bool>>,
    /// Baseline regression input, `[B][flatten]`.
    flat: Vec<Vec<f64>>,
    /// Baseline body-fat predictions.
    bf: Vec<f64>,
}

/// Result of one pass: central difference and kink flag per coordinate.
pub(super) struct PassResult {
    pub numeric: Half,
    pub kinked: [bool; K],
}

impl<'a> PairedEvaluator<'a> {
    /// `outputs` are the baseline layer outputs under the same `norm` mode.
    pub fn new(
        model: &'a ShapedNetModel,
        images: &Tensor,
        outputs: &[Tensor],
        target: &'a GridTarget,
        weights: &LossWeights,
        mode: BfLossMode,
        norm: NormMode,
    ) -> Self {
        let cfg = &model.config;
        let batch = images.shape()[0];
        let n = model.layers.len();
        let mut convs = Vec::with_capacity(n);
        let mut conv_inputs = Vec::with_capacity(n);
        for (i, layer) in model.layers.iter().enumerate() {
            let (LayerSpec::Conv { size, stride, .. }, Some(c)) = (&layer.spec, &layer.conv) else {
                convs.push(None);
                conv_inputs.push(None);
                continue;
            };
            let input = if i == 0 { images } else { &outputs[i - 1] };
            let s = input.shape();
            let out = outputs[i].shape();
            let (out_c, k) = (c.weight.shape()[0], *size);
            let out_pad = out_c.div_ceil(BLOCK) * BLOCK;
            let mut packed = vec![0.0; s[1] * k * k * out_pad];
            for o in 0..out_c {
                for t in 0..s[1] * k * k {
                    packed[t * out_pad + o] = c.weight.data()[o * s[1] * k * k + t];
                }
            }
            let geometry = crate::engine::conv::ConvGeometry {
                batch,
                in_channels: s[1],
                in_h: s[2],
                in_w: s[3],
                out_channels: out_c,
                k_h: k,
                k_w: k,
                stride: *stride,
                pad: k / 2,
            };
            let raw = crate::engine::conv::forward(&geometry, input.data(), c.weight.data());
            let raw = channel_major(&Tensor::from_parts(out.to_vec(), raw));
            let finish = match &c.bn {
                Some(bn) => {
                    let stats = match norm {
                        NormMode::Train => batch_stats(&raw, out_c, cfg.bn_eps),
                        NormMode::Infer => NormStats {
                            mean: bn.running_mean.data().to_vec(),
                            var: Vec::new(),
                            inv_std: bn
                                .running_var
                                .data()
                                .iter()
                                .map(|v| 1.0 / (v + cfg.bn_eps).sqrt())
                                .collect(),
                            batch: false,
                        },
                    };
                    let (g, b) = (bn.gamma.data(), bn.beta.data());
                    let per = raw.len() / out_c;
                    let normalized = raw
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| {
                            let ci = i / per;
                            g[ci] * ((x - stats.mean[ci]) * stats.inv_std[ci]) + b[ci]
                        })
                        .collect();
                    Finish::Norm {
                        params: ChannelLanes::constant(g, b),
                        stats,
                        normalized,
                    }
                }
                None => {
                    let bias = c.bias.as_ref().expect("conv without normalization has a bias");
                    Finish::Bias(ChannelLanes::constant(&vec![1.0; out_c], bias.data()))
                }
            };
            conv_inputs.push(Some(input.clone()));
            convs.push(Some(ConvLayer {
                in_c: s[1],
                in_h: s[2],
                in_w: s[3],
                out_c,
                out_h: out[2],
                out_w: out[3],
                k,
                stride: *stride,
                pad: k / 2,
                out_pad,
                packed,
                raw,
                finish,
            }));
        }
        let four_d = |t: &Tensor| t.shape().len() == 4;
        let base: Vec<Vec<f64>> = outputs
            .iter()
            .map(|t| if four_d(t) { channel_major(t) } else { Vec::new() })
            .collect();
        let clean: Vec<Act> = outputs
            .iter()
            .map(|t| {
                if four_d(t) {
                    Act::like(t)
                } else {
                    // detection layers: their producer's activation is used instead
                    Act::zeros(0, batch, 0, 0)
                }
            })
            .collect();
        let work = clean.clone();
        let dirty = (0..n).map(|i| model.dependents(i)).collect();
        let flat: Vec<Vec<f64>> = {
            let t = &outputs[BACKBONE_END];
            let per = t.len() / batch;
            t.data().chunks(per).map(<[f64]>::to_vec).collect()
        };
        let bf = match &model.regression {
            Some(r) => flat
                .iter()
                .map(|x| {
                    let mut acc = 0.0;
                    for (xv, wv) in x.iter().zip(r.weights.data()) {
                        acc += xv * wv;
                    }
                    acc + r.bias.data()[0]
                })
                .collect(),
            None => Vec::new(),
        };
        Self {
            model,
            target,
            weights: *weights,
            mode,
            batch,
            isa: Isa::detect(),
            convs,
            conv_inputs,
            base,
            clean,
            work,
            dirty,
            flat,
            bf,
        }
    }

    /// Central differences for up to `K` elements of one parameter tensor.
    /// `steps[k]` is the half-width for `elements[k]`; missing lanes repeat
    /// the first element.
    pub fn run(
        &mut self,
        owner: ParamOwner,
        kind: ParamKind,
        values: &[f64],
        elements: &[usize],
        steps: &[f64],
    ) -> PassResult {
        assert!(!elements.is_empty() && elements.len() <= K && steps.len() == elements.len());
        let mut idx = [elements[0]; K];
        let mut lo_shift = [0.0; K];
        let mut width = [0.0; K];
        for k in 0..K {
            let (e, h) = if k < elements.len() {
                (elements[k], steps[k])
            } else {
                (elements[0], steps[0])
            };
            idx[k] = e;
            let theta = values[e];
            let minus = theta - h;
            lo_shift[k] = minus - theta;
            width[k] = (theta + h) - minus;
        }
        let mut kinks = 0u32;
        let delta = match owner {
            ParamOwner::Layer(l) => self.layer_pass(l, kind, &idx, &lo_shift, &width, &mut kinks),
            ParamOwner::Regression => self.regression_pass(kind, &idx, &lo_shift, &width, &mut kinks),
        };
        let mut out = PassResult {
            numeric: [0.0; K],
            kinked: [false; K],
        };
        for k in 0..K {
            out.numeric[k] = delta[k] / width[k];
            out.kinked[k] = kinks >> k & 1 == 1;
        }
        out
    }

    fn layer_pass(
        &mut self,
        l: usize,
        kind: ParamKind,
        idx: &[usize; K],
        lo_shift: &Half,
        width: &Half,
        kinks: &mut u32,
    ) -> Half {
        let cfg = &self.model.config;
        let conv = self.convs[l].as_ref().expect("parameters belong to a conv layer");
        let act = &mut self.work[l];
        act.v.fill([0.0; N]);
        let mut finish = conv.finish.clone();
        match kind {
            ParamKind::Weight => {
                let input = self.conv_inputs[l].as_ref().expect("conv layer").data();
                let plane_in = conv.in_h * conv.in_w;
                let plane_out = conv.out_h * conv.out_w;
                for k in 0..K {
                    let e = idx[k];
                    let kx = e % conv.k;
                    let ky = e / conv.k % conv.k;
                    let c = e / (conv.k * conv.k) % conv.in_c;
                    let o = e / (conv.k * conv.k * conv.in_c);
                    for b in 0..self.batch {
                        for oy in 0..conv.out_h {
                            let Some(iy) = tap(oy, ky, conv.stride, conv.pad, conv.in_h) else {
                                continue;
                            };
                            for ox in 0..conv.out_w {
                                let Some(ix) = tap(ox, kx, conv.stride, conv.pad, conv.in_w) else {
                                    continue;
                                };
                                let x = input[(b * conv.in_c + c) * plane_in + iy * conv.in_w + ix];
                                let cell = &mut act.v[(o * self.batch + b) * plane_out + oy * conv.out_w + ox];
                                cell[k] = lo_shift[k] * x;
                                cell[K + k] = width[k] * x;
                            }
                        }
                    }
                }
            }
            ParamKind::Bias | ParamKind::Beta => {
                let p = match &mut finish {
                    Finish::Norm { params, .. } | Finish::Bias(params) => params,
                };
                for k in 0..K {
                    p.shift_off[idx[k]][k] = lo_shift[k];
                    p.shift_d[idx[k]][k] = width[k];
                }
            }
            ParamKind::Gamma => {
                let Finish::Norm { params, .. } = &mut finish else {
                    unreachable!("gamma belongs to a normalized layer")
                };
                for k in 0..K {
                    params.scale_off[idx[k]][k] = lo_shift[k];
                    params.scale_d[idx[k]][k] = width[k];
                }
            }
        }
        apply_finish(act, &conv.raw, &finish, cfg.bn_eps, cfg.leaky_slope, kinks);

        let dirty = &self.dirty[l];
        for j in l + 1..self.model.layers.len() {
            if !dirty[j] {
                continue;
            }
            let (before, rest) = self.work.split_at_mut(j);
            let out = &mut rest[0];
            let get = |i: usize| if dirty[i] { &before[i] } else { &self.clean[i] };
            match &self.model.layers[j].spec {
                LayerSpec::Conv { .. } => {
                    let conv = self.convs[j].as_ref().expect("conv layer");
                    conv_lanes(self.isa, conv, self.batch, &get(j - 1).v, &mut out.v);
                    apply_finish(out, &conv.raw, &conv.finish, cfg.bn_eps, cfg.leaky_slope, kinks);
                }
                LayerSpec::Shortcut { from } => {
                    let (a, b) = (get(j - 1), get(*from));
                    for ((o, x), y) in out.v.iter_mut().zip(&a.v).zip(&b.v) {
                        for lane in 0..N {
                            o[lane] = x[lane] + y[lane];
                        }
                    }
                }
                LayerSpec::Route { sources } => {
                    let mut at = 0;
                    for &s in sources {
                        let src = &get(s).v;
                        out.v[at..at + src.len()].copy_from_slice(src);
                        at += src.len();
                    }
                }
                LayerSpec::Upsample => {
                    let src = get(j - 1);
                    let (h, w) = (src.h, src.w);
                    for cb in 0..src.c * self.batch {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                out.v[(cb * 2 * h + y) * 2 * w + x] = src.v[(cb * h + y / 2) * w + x / 2];
                            }
                        }
                    }
                }
                LayerSpec::Detection { .. } => {}
            }
        }

        let mut heads: [Option<(&Act, &[f64])>; 3] = [None; 3];
        for (j, layer) in self.model.layers.iter().enumerate() {
            if let LayerSpec::Detection { scale } = layer.spec {
                if dirty[j] {
                    heads[scale] = Some((&self.work[j - 1], &self.base[j - 1]));
                }
            }
        }
        let bf = match &self.model.regression {
            Some(r) if dirty[BACKBONE_END] => {
                let a = &self.work[BACKBONE_END];
                let plane = a.h * a.w;
                let w = r.weights.data();
                let mut out = vec![[0.0; N]; self.batch];
                for (b, acc) in out.iter_mut().enumerate() {
                    for c in 0..a.c {
                        let cells = &a.v[(c * self.batch + b) * plane..][..plane];
                        for (p, cell) in cells.iter().enumerate() {
                            let wv = w[c * plane + p];
                            for lane in 0..N {
                                acc[lane] += wv * cell[lane];
                            }
                        }
                    }
                }
                Some(out)
            }
            _ => None,
        };
        self.loss_delta(heads, bf.as_deref(), kinks)
    }

    fn regression_pass(
        &self,
        kind: ParamKind,
        idx: &[usize; K],
        lo_shift: &Half,
        width: &Half,
        kinks: &mut u32,
    ) -> Half {
        let mut out = vec![[0.0; N]; self.batch];
        for (b, lanes) in out.iter_mut().enumerate() {
            let y = &self.flat[b];
            for k in 0..K {
                let x = match kind {
                    ParamKind::Bias => 1.0,
                    _ => y[idx[k]],
                };
                lanes[k] = lo_shift[k] * x;
                lanes[K + k] = width[k] * x;
            }
        }
        self.loss_delta([None; 3], Some(&out), kinks)
    }

    /// Difference of the total loss for each coordinate.
    fn loss_delta(&self, heads: [Option<(&Act, &[f64])>; 3], bf: Option<&[Lanes]>, kinks: &mut u32) -> Half {
        let t = self.target;
        let cfg = &self.model.config;
        let attrs = 5 + t.num_classes;
        let (lc, ln) = (self.weights.lambda_coord, self.weights.lambda_noobj);
        let mut sum = [0.0; K];
        for (scale, head) in heads.iter().enumerate() {
            let Some((a, base)) = head else { continue };
            let st = &t.scales[scale];
            let s = st.grid;
            let anchors = cfg.head_anchors(scale);
            let at = |ch: usize, b: usize, gy: usize, gx: usize| {
                let i = ((ch * self.batch + b) * s + gy) * s + gx;
                (base[i], &a.v[i])
            };
            for b in 0..self.batch {
                for gy in 0..s {
                    for gx in 0..s {
                        for an in 0..ANCHORS_PER_HEAD {
                            let slot = st.slot(b, gy, gx, an);
                            let ch = an * attrs;
                            let conf = at(ch + 4, b, gy, gx);
                            if !st.obj[slot] {
                                for k in 0..K {
                                    let (lo, hi, d) = sigmoid_pair(conf.0 + conf.1[k], conf.1[K + k]);
                                    sum[k] += ln * d * (hi + lo);
                                }
                                continue;
                            }
                            let [ox, oy, bw, bh] = st.boxes[slot];
                            let (aw, ah) = anchors[an];
                            let (tx, ty) = (at(ch, b, gy, gx), at(ch + 1, b, gy, gx));
                            let (tw, th) = (at(ch + 2, b, gy, gx), at(ch + 3, b, gy, gx));
                            for k in 0..K {
                                let mut acc = 0.0;
                                for ((base, raw), g) in [(tx, ox), (ty, oy)] {
                                    let (lo, hi, d) = sigmoid_pair(base + raw[k], raw[K + k]);
                                    acc += lc * d * (hi + lo - 2.0 * g);
                                }
                                for ((base, raw), anchor, g) in [(tw, aw, bw), (th, ah, bh)] {
                                    let lo = anchor.sqrt() * (0.5 * (base + raw[k])).exp();
                                    let d = lo * (0.5 * raw[K + k]).exp_m1();
                                    acc -= lc * d * (2.0 * g.sqrt() - 2.0 * lo - d);
                                }
                                let (lo, hi, d) = sigmoid_pair(conf.0 + conf.1[k], conf.1[K + k]);
                                acc -= d * (2.0 - hi - lo);
                                for c in 0..t.num_classes {
                                    let p = if st.class_id[slot] == c { 1.0 } else { 0.0 };
                                    let (base, raw) = at(ch + 5 + c, b, gy, gx);
                                    let (lo, hi, d) = sigmoid_pair(base + raw[k], raw[K + k]);
                                    acc -= d * (2.0 * p - hi - lo);
                                }
                                sum[k] += acc;
                            }
                        }
                    }
                }
            }
        }
        if let Some(bf) = bf {
            let lf = self.weights.lambda_f;
            for ((lanes, &target), &base) in bf.iter().zip(&t.bfp).zip(&self.bf) {
                for k in 0..K {
                    let (lo, d) = (base + lanes[k], lanes[K + k]);
                    let hi = lo + d;
                    // r = (target - prediction) / target
                    let dr = -d / target;
                    sum[k] += match self.mode {
                        BfLossMode::Signed => lf * dr,
                        BfLossMode::Squared => {
                            let r_lo = (target - lo) / target;
                            lf * dr * (2.0 * r_lo + dr)
                        }
                        BfLossMode::Absolute => {
                            if (lo > target) == (hi > target) && lo != target && hi != target {
                                if lo > target {
                                    -lf * dr
                                } else {
                                    lf * dr
                                }
                            } else {
                                *kinks |= 1 << k;
                                lf * (((target - hi) / target).abs() - ((target - lo) / target).abs())
                            }
                        }
                    };
                }
            }
        }
        sum.map(|s| s / self.batch as f64)
    }
}

/// `sigmoid(lo)`, `sigmoid(lo + d)` and their difference.
fn sigmoid_pair(lo: f64, d: f64) -> (f64, f64, f64) {
    let s_lo = sigmoid(lo);
    let s_hi = sigmoid(lo + d);
    (s_lo, s_hi, -s_hi * sigmoid(-lo) * (-d).exp_m1())
}

/// Input coordinate of output `o` under kernel offset `k`, if inside the image.
fn tap(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (o * stride + k).checked_sub(pad)?;
    (i < len).then_some(i)
}

/// `raw` is the layer's baseline conv output.
fn apply_finish(act: &mut Act, raw: &[f64], finish: &Finish, eps: f64, slope: f64, kinks: &mut u32) {
    match finish {
        Finish::Norm {
            params,
            stats,
            normalized,
        } => {
            batch_norm(act, raw, params, stats, eps);
            leaky(act, normalized, slope, kinks);
        }
        Finish::Bias(p) => {
            let per = act.v.len() / act.c;
            for (c, block) in act.v.chunks_mut(per).enumerate() {
                for cell in block {
                    for k in 0..K {
                        cell[k] += p.shift_off[c][k];
                        cell[K + k] += p.shift_d[c][k];
                    }
                }
            }
        }
    }
}

fn batch_norm(act: &mut Act, raw: &[f64], p: &ChannelLanes, stats: &NormStats, eps: f64) {
    let per = act.v.len() / act.c;
    let m = per as f64;
    for (c, (block, raw)) in act.v.chunks_mut(per).zip(raw.chunks(per)).enumerate() {
        let (mean0, inv0) = (stats.mean[c], stats.inv_std[c]);
        // Offsets of the mean and inverse std at theta - h, and their
        // differences between theta + h and theta - h.
        let mut mean_off = [0.0; K];
        let mut mean_d = [0.0; K];
        let mut inv_lo = [inv0; K];
        let mut inv_off = [0.0; K];
        let mut inv_hi = [inv0; K];
        let mut dinv = [0.0; K];
        if stats.batch {
            for cell in block.iter() {
                for k in 0..K {
                    mean_off[k] += cell[k];
                    mean_d[k] += cell[K + k];
                }
            }
            for k in 0..K {
                mean_off[k] /= m;
                mean_d[k] /= m;
            }
            let mut var_off = [0.0; K];
            let mut var_d = [0.0; K];
            for (cell, &x) in block.iter().zip(raw) {
                let c0 = x - mean0;
                for k in 0..K {
                    let ca = cell[k] - mean_off[k];
                    let cl = c0 + ca;
                    let dc = cell[K + k] - mean_d[k];
                    var_off[k] += ca * (2.0 * c0 + ca);
                    var_d[k] += dc * (2.0 * cl + dc);
                }
            }
            let s0 = (stats.var[c] + eps).sqrt();
            for k in 0..K {
                let (vo, vd) = (var_off[k] / m, var_d[k] / m);
                let s_lo = (stats.var[c] + vo + eps).sqrt();
                let s_hi = (stats.var[c] + vo + vd + eps).sqrt();
                inv_lo[k] = 1.0 / s_lo;
                inv_hi[k] = 1.0 / s_hi;
                inv_off[k] = -vo / (s_lo * s0 * (s_lo + s0));
                dinv[k] = -vd / (s_hi * s_lo * (s_hi + s_lo));
            }
        }
        let g0 = p.scale[c];
        let (g_off, g_d) = (&p.scale_off[c], &p.scale_d[c]);
        let (b_off, b_d) = (&p.shift_off[c], &p.shift_d[c]);
        for (cell, &x) in block.iter_mut().zip(raw) {
            let c0 = x - mean0;
            let xhat0 = c0 * inv0;
            for k in 0..K {
                let ca = cell[k] - mean_off[k];
                let cl = c0 + ca;
                let dc = cell[K + k] - mean_d[k];
                let x_off = ca * inv_lo[k] + c0 * inv_off[k];
                let x_lo = xhat0 + x_off;
                let dx = dc * inv_hi[k] + cl * dinv[k];
                let g_lo = g0 + g_off[k];
                cell[k] = g_off[k] * x_lo + g0 * x_off + b_off[k];
                cell[K + k] = g_d[k] * (x_lo + dx) + g_lo * dx + b_d[k];
            }
        }
    }
}

/// `base` holds the baseline inputs.
fn leaky(act: &mut Act, base: &[f64], slope: f64, kinks: &mut u32) {
    let f = |x: f64| if x >= 0.0 { x } else { slope * x };
    for (cell, &x0) in act.v.iter_mut().zip(base) {
        for k in 0..K {
            let (off, d) = (cell[k], cell[K + k]);
            let lo = x0 + off;
            let hi = lo + d;
            cell[k] = match (x0 >= 0.0, lo >= 0.0) {
                (true, true) => off,
                (false, false) => slope * off,
                _ => f(lo) - f(x0),
            };
            cell[K + k] = match (lo >= 0.0, hi >= 0.0) {
                (true, true) => d,
                (false, false) => slope * d,
                _ => {
                    *kinks |= 1 << k;
                    f(hi) - f(lo)
                }
            };
        }
    }
}

/// Output channels accumulated together by the convolution kernel.
const BLOCK: usize = 4;

#[derive(Debug, Clone, Copy)]
enum Isa {
    Portable,
    #[cfg(target_arch = "x86_64")]
    Fma,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

impl Isa {
    fn detect() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("fma") {
                return Isa::Avx512;
            }
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                return Isa::Fma;
            }
        }
        Isa::Portable
    }
}

trait MulAdd {
    fn mul_add(a: f64, b: f64, c: f64) -> f64;
}

struct Separate;

impl MulAdd for Separate {
    #[inline(always)]
    fn mul_add(a: f64, b: f64, c: f64) -> f64 {
        a * b + c
    }
}

#[cfg(target_arch = "x86_64")]
struct Fused;

#[cfg(target_arch = "x86_64")]
impl MulAdd for Fused {
    #[inline(always)]
    fn mul_add(a: f64, b: f64, c: f64) -> f64 {
        a.mul_add(b, c)
    }
}

fn conv_lanes(isa: Isa, l: &ConvLayer, batch: usize, input: &[Lanes], out: &mut [Lanes]) {
    match isa {
        Isa::Portable => conv_body::<Separate>(l, batch, input, out),
        // SAFETY: the features were detected at runtime.
        #[cfg(target_arch = "x86_64")]
        Isa::Fma => unsafe { conv_fma(l, batch, input, out) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { conv_avx512(l, batch, input, out) },
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn conv_fma(l: &ConvLayer, batch: usize, input: &[Lanes], out: &mut [Lanes]) {
    conv_body::<Fused>(l, batch, input, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
unsafe fn conv_avx512(l: &ConvLayer, batch: usize, input: &[Lanes], out: &mut [Lanes]) {
    conv_body::<Fused>(l, batch, input, out)
}

#[inline(always)]
fn conv_body<M: MulAdd>(l: &ConvLayer, batch: usize, input: &[Lanes], out: &mut [Lanes]) {
    let plane_in = l.in_h * l.in_w;
    let plane_out = l.out_h * l.out_w;
    let range = |o: usize, len: usize| {
        let lo = (0..l.k)
            .find(|&k| tap(o, k, l.stride, l.pad, len).is_some())
            .unwrap_or(l.k);
        let hi = (0..l.k)
            .rev()
            .find(|&k| tap(o, k, l.stride, l.pad, len).is_some())
            .map_or(lo, |k| k + 1);
        (lo, hi.max(lo))
    };
    let rows: Vec<(usize, usize)> = (0..l.out_h).map(|o| range(o, l.in_h)).collect();
    let cols: Vec<(usize, usize)> = (0..l.out_w).map(|o| range(o, l.in_w)).collect();
    for ob in (0..l.out_c).step_by(BLOCK) {
        let nb = BLOCK.min(l.out_c - ob);
        for b in 0..batch {
            for oy in 0..l.out_h {
                let (ky0, ky1) = rows[oy];
                for ox in 0..l.out_w {
                    let (kx0, kx1) = cols[ox];
                    let mut acc = [[0.0; N]; BLOCK];
                    for c in 0..l.in_c {
                        let base = (c * batch + b) * plane_in;
                        for ky in ky0..ky1 {
                            let iy = oy * l.stride + ky - l.pad;
                            for kx in kx0..kx1 {
                                let ix = ox * l.stride + kx - l.pad;
                                let x = &input[base + iy * l.in_w + ix];
                                let wb = ((c * l.k + ky) * l.k + kx) * l.out_pad + ob;
                                let w = &l.packed[wb..wb + BLOCK];
                                for j in 0..BLOCK {
                                    for lane in 0..N {
                                        acc[j][lane] = M::mul_add(w[j], x[lane], acc[j][lane]);
                                    }
                                }
                            }
                        }
                    }
                    for (j, a) in acc.iter().enumerate().take(nb) {
                        out[((ob + j) * batch + b) * plane_out + oy * l.out_w + ox] = *a;
                    }
                }
            }
        }
    }
}
