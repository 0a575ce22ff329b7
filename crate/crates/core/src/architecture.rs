//! The network: a Darknet-53 backbone, three multi-scale detection heads and
//! a body-fat regression branch on the backbone's final feature map.
//!
//! The layer list follows the darknet `yolov3.cfg` numbering, including the
//! detection marker layers, so layer 74 is the backbone terminus, the head
//! branches leave from layers 79, 91 and 103, and the three detection outputs
//! are layers 82, 94 and 106.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{BatchStats, Graph, NormMode, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;
use crate::training::init_glorot;

/// Number of anchors per detection head.
pub const ANCHORS_PER_HEAD: usize = 3;

/// Full-width channel counts of the backbone stages.
const BASE_WIDTHS: [usize; 6] = [32, 64, 128, 256, 512, 1024];
/// Residual blocks per backbone stage.
const STAGE_BLOCKS: [usize; 5] = [1, 2, 8, 8, 4];

/// The nine reference anchors (pixels at 416x416), smallest first.
const REFERENCE_ANCHORS: [(f64, f64); 9] = [
    (10.0, 13.0),
    (16.0, 30.0),
    (33.0, 23.0),
    (30.0, 61.0),
    (62.0, 45.0),
    (59.0, 119.0),
    (116.0, 90.0),
    (156.0, 198.0),
    (373.0, 326.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Square input side in pixels; must be a multiple of 32.
    pub input_size: usize,
    /// Scale on every channel width (1 = full Darknet-53 widths).
    pub channel_mult: f64,
    pub num_classes: usize,
    /// Nine (width, height) pairs in normalized image units, smallest first.
    /// Anchors 6..9 belong to the stride-32 head, 3..6 to stride 16 and 0..3
    /// to stride 8.
    pub anchors: [(f64, f64); 9],
    pub regression_branch: bool,
    pub leaky_slope: f64,
    /// Inverted-dropout rate on the regression input during training.
    pub dropout: f64,
    pub bn_eps: f64,
    /// Weight of the newest batch statistics in the running averages.
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 416,
            channel_mult: 1.0,
            num_classes: 1,
            anchors: default_anchors(),
            regression_branch: true,
            leaky_slope: 0.1,
            dropout: 0.0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

pub fn default_anchors() -> [(f64, f64); 9] {
    REFERENCE_ANCHORS.map(|(w, h)| (w / 416.0, h / 416.0))
}

impl NetworkConfig {
    /// Desk-scale configuration: 64 px input, 1/8 channel widths.
    pub fn toy() -> Self {
        Self {
            input_size: 64,
            channel_mult: 0.125,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input size {} is not a positive multiple of 32",
                self.input_size
            )));
        }
        if !(self.channel_mult > 0.0) || !self.channel_mult.is_finite() {
            return Err(Error::Config(format!(
                "channel multiplier must be positive, got {}",
                self.channel_mult
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self
            .anchors
            .iter()
            .any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()))
        {
            return Err(Error::Config("anchors must have positive finite sizes".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config(format!("leaky slope {} not in [0, 1)", self.leaky_slope)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config("bn_eps must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must be in [0, 1]".into()));
        }
        Ok(())
    }

    fn width(&self, base: usize) -> usize {
        ((base as f64 * self.channel_mult).round() as usize).max(1)
    }

    /// Values per anchor slot: 4 box terms, objectness, class scores.
    pub fn attrs(&self) -> usize {
        5 + self.num_classes
    }

    /// Grid sizes of the three heads: stride 32, 16, 8.
    pub fn head_grids(&self) -> [usize; 3] {
        [self.input_size / 32, self.input_size / 16, self.input_size / 8]
    }

    /// Anchors of head `scale` (0 = stride 32).
    pub fn head_anchors(&self, scale: usize) -> [(f64, f64); ANCHORS_PER_HEAD] {
        let base = (2 - scale) * ANCHORS_PER_HEAD;
        [self.anchors[base], self.anchors[base + 1], self.anchors[base + 2]]
    }
}

/// One entry of the layer list, without parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        size: usize,
        stride: usize,
        /// Batch-normalized with leaky activation; otherwise biased and linear.
        batch_norm: bool,
    },
    /// Residual sum of the previous layer and layer `from`.
    Shortcut {
        from: usize,
    },
    /// Channel concatenation of the listed layers (identity for one source).
    Route {
        sources: Vec<usize>,
    },
    Upsample,
    /// Marks head `scale`'s output; rearranges it to `[B, S, S, 3, 5+nc]`.
    Detection {
        scale: usize,
    },
}

impl LayerSpec {
    /// Layers whose outputs this layer reads (`None` = the input images).
    pub(crate) fn inputs(&self, index: usize) -> Vec<Option<usize>> {
        let prev = index.checked_sub(1);
        match self {
            LayerSpec::Conv { .. } | LayerSpec::Upsample | LayerSpec::Detection { .. } => vec![prev],
            LayerSpec::Shortcut { from } => vec![prev, Some(*from)],
            LayerSpec::Route { sources } => sources.iter().map(|&s| Some(s)).collect(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Shortcut { .. } => "shortcut",
            LayerSpec::Route { .. } => "route",
            LayerSpec::Upsample => "upsample",
            LayerSpec::Detection { .. } => "detection",
        }
    }
}

/// Index of the backbone's final layer (the regression branch input).
pub const BACKBONE_END: usize = 74;
/// Layers where the three head branches split off.
pub const HEAD_BRANCH_LAYERS: [usize; 3] = [79, 91, 103];

/// The full layer list for a configuration.
pub fn topology(config: &NetworkConfig) -> Vec<LayerSpec> {
    let w = |base: usize| config.width(base);
    let out_filters = ANCHORS_PER_HEAD * config.attrs();
    let mut layers = Vec::new();
    let conv = |filters, size, stride| LayerSpec::Conv {
        filters,
        size,
        stride,
        batch_norm: true,
    };

    layers.push(conv(w(BASE_WIDTHS[0]), 3, 1));
    for (stage, &blocks) in STAGE_BLOCKS.iter().enumerate() {
        let width = w(BASE_WIDTHS[stage + 1]);
        let half = w(BASE_WIDTHS[stage]);
        layers.push(conv(width, 3, 2));
        for _ in 0..blocks {
            let from = layers.len() - 1;
            layers.push(conv(half, 1, 1));
            layers.push(conv(width, 3, 1));
            layers.push(LayerSpec::Shortcut { from });
        }
    }
    debug_assert_eq!(layers.len() - 1, BACKBONE_END);

    // (branch width, route conv width, concatenated backbone layer)
    let heads = [(512, Some((256, 61))), (256, Some((128, 36))), (128, None)];
    for (scale, &(base, next)) in heads.iter().enumerate() {
        let narrow = w(base);
        let wide = w(base * 2);
        for i in 0..5 {
            layers.push(if i % 2 == 0 {
                conv(narrow, 1, 1)
            } else {
                conv(wide, 3, 1)
            });
        }
        let branch = layers.len() - 1;
        layers.push(conv(wide, 3, 1));
        layers.push(LayerSpec::Conv {
            filters: out_filters,
            size: 1,
            stride: 1,
            batch_norm: false,
        });
        layers.push(LayerSpec::Detection { scale });
        if let Some((route_width, skip)) = next {
            layers.push(LayerSpec::Route { sources: vec![branch] });
            layers.push(conv(w(route_width), 1, 1));
            layers.push(LayerSpec::Upsample);
            let up = layers.len() - 1;
            layers.push(LayerSpec::Route {
                sources: vec![up, skip],
            });
        }
    }
    layers
}

/// Output shape of a single layer entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub index: usize,
    pub kind: &'static str,
    /// (channels, height, width)
    pub output: (usize, usize, usize),
    pub params: usize,
}

/// Analytic shapes of every layer, computed without running the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeReport {
    pub input_size: usize,
    pub layers: Vec<LayerShape>,
    pub regression_input: (usize, usize, usize),
    pub flatten_len: usize,
    pub head_grids: [usize; 3],
    pub backbone_convs: usize,
    pub total_params: usize,
}

impl ShapeReport {
    /// Weighted layers along the regression path: backbone convolutions plus
    /// the dense regression layer.
    pub fn regression_path_weighted_layers(&self) -> usize {
        self.backbone_convs + 1
    }
}

impl fmt::Display for ShapeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input: 3 x {0} x {0}", self.input_size)?;
        for l in &self.layers {
            let (c, h, w) = l.output;
            writeln!(
                f,
                "{:>4} {:<10} {:>5} x {:>3} x {:>3} {:>10}",
                l.index, l.kind, c, h, w, l.params
            )?;
        }
        let (c, h, w) = self.regression_input;
        writeln!(f, "regression input: {c} x {h} x {w}")?;
        writeln!(f, "flatten: {}", self.flatten_len)?;
        writeln!(
            f,
            "heads: {} {} {}",
            self.head_grids[0], self.head_grids[1], self.head_grids[2]
        )?;
        writeln!(f, "backbone conv layers: {}", self.backbone_convs)?;
        write!(f, "parameters: {}", self.total_params)
    }
}

pub fn shape_report(config: &NetworkConfig) -> Result<ShapeReport> {
    config.validate()?;
    let specs = topology(config);
    let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(specs.len());
    let mut layers = Vec::with_capacity(specs.len());
    let mut total_params = 0;
    for (i, spec) in specs.iter().enumerate() {
        let input = |src: Option<usize>| src.map_or((3, config.input_size, config.input_size), |s| shapes[s]);
        let (out, params) = match spec {
            LayerSpec::Conv {
                filters,
                size,
                stride,
                batch_norm,
            } => {
                let (c, h, w) = input(i.checked_sub(1));
                let pad = size / 2;
                let oh = (h + 2 * pad - size) / stride + 1;
                let ow = (w + 2 * pad - size) / stride + 1;
                let extra = if *batch_norm { 2 * filters } else { *filters };
                ((*filters, oh, ow), filters * c * size * size + extra)
            }
            LayerSpec::Shortcut { .. } | LayerSpec::Detection { .. } => (input(Some(i - 1)), 0),
            LayerSpec::Upsample => {
                let (c, h, w) = input(Some(i - 1));
                ((c, 2 * h, 2 * w), 0)
            }
            LayerSpec::Route { sources } => {
                let (_, h, w) = shapes[sources[0]];
                ((sources.iter().map(|&s| shapes[s].0).sum(), h, w), 0)
            }
        };
        total_params += params;
        shapes.push(out);
        layers.push(LayerShape {
            index: i,
            kind: spec.name(),
            output: out,
            params,
        });
    }
    let regression_input = shapes[BACKBONE_END];
    let flatten_len = regression_input.0 * regression_input.1 * regression_input.2;
    if config.regression_branch {
        total_params += flatten_len + 1;
    }
    let backbone_convs = specs[..=BACKBONE_END]
        .iter()
        .filter(|s| matches!(s, LayerSpec::Conv { .. }))
        .count();
    Ok(ShapeReport {
        input_size: config.input_size,
        layers,
        regression_input,
        flatten_len,
        head_grids: config.head_grids(),
        backbone_convs,
        total_params,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub bn: Option<BatchNormParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub conv: Option<ConvParams>,
}

/// Regression head: `bf = y_fl . w_bf + bias` with identity activation.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionHead {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapedNetModel {
    pub config: NetworkConfig,
    pub layers: Vec<Layer>,
    pub regression: Option<RegressionHead>,
}

/// Raw network outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutputs {
    /// Per head (stride 32, 16, 8): `[B, S, S, 3, 5 + nc]` raw values.
    pub heads: [Tensor; 3],
    /// `[B, 1]` body-fat predictions, absent when the branch is disabled.
    pub bf: Option<Tensor>,
}

/// Graph handles produced by [`ShapedNetModel::forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub heads: [Var; 3],
    pub bf: Option<Var>,
    pub layer_outputs: Vec<Var>,
    /// Training-mode statistics for each batch-normalized layer.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

/// Identifies what a trainable parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamOwner {
    Layer(usize),
    Regression,
}

pub fn build_network(config: NetworkConfig, seed: u64) -> Result<ShapedNetModel> {
    config.validate()?;
    let report = shape_report(&config)?;
    let specs = topology(&config);
    let mut stream = 0u64;
    let mut next_seed = || {
        stream += 1;
        derive_seed(seed, stream)
    };
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.into_iter().enumerate() {
        let conv = match &spec {
            LayerSpec::Conv {
                filters,
                size,
                batch_norm,
                ..
            } => {
                let in_ch = if i == 0 { 3 } else { report.layers[i - 1].output.0 };
                let weight = init_glorot(&[*filters, in_ch, *size, *size], next_seed());
                let (bias, bn) = if *batch_norm {
                    (
                        None,
                        Some(BatchNormParams {
                            gamma: Tensor::ones(&[*filters]),
                            beta: Tensor::zeros(&[*filters]),
                            running_mean: Tensor::zeros(&[*filters]),
                            running_var: Tensor::ones(&[*filters]),
                        }),
                    )
                } else {
                    (Some(Tensor::zeros(&[*filters])), None)
                };
                Some(ConvParams { weight, bias, bn })
            }
            _ => None,
        };
        layers.push(Layer { spec, conv });
    }
    let regression = config.regression_branch.then(|| RegressionHead {
        weights: init_glorot(&[1, report.flatten_len], next_seed()),
        bias: Tensor::zeros(&[1]),
    });
    Ok(ShapedNetModel {
        config,
        layers,
        regression,
    })
}

impl ShapedNetModel {
    /// Trainable parameters in canonical order: per conv layer its kernel then
    /// bias or (gamma, beta); finally the regression weights and bias.
    pub fn params(&self) -> Vec<(String, ParamOwner, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(c) = &layer.conv {
                let owner = ParamOwner::Layer(i);
                out.push((format!("layers.{i}.weight"), owner, &c.weight));
                if let Some(b) = &c.bias {
                    out.push((format!("layers.{i}.bias"), owner, b));
                }
                if let Some(bn) = &c.bn {
                    out.push((format!("layers.{i}.bn.gamma"), owner, &bn.gamma));
                    out.push((format!("layers.{i}.bn.beta"), owner, &bn.beta));
                }
            }
        }
        if let Some(r) = &self.regression {
            out.push(("regression.weight".into(), ParamOwner::Regression, &r.weights));
            out.push(("regression.bias".into(), ParamOwner::Regression, &r.bias));
        }
        out
    }

    /// Mutable access in the same order as [`ShapedNetModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Some(c) = &mut layer.conv {
                out.push(&mut c.weight);
                if let Some(b) = &mut c.bias {
                    out.push(b);
                }
                if let Some(bn) = &mut c.bn {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
            }
        }
        if let Some(r) = &mut self.regression {
            out.push(&mut r.weights);
            out.push(&mut r.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Every stored tensor (parameters and running statistics) by name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(c) = &layer.conv {
                out.push((format!("layers.{i}.weight"), &c.weight));
                if let Some(b) = &c.bias {
                    out.push((format!("layers.{i}.bias"), b));
                }
                if let Some(bn) = &c.bn {
                    out.push((format!("layers.{i}.bn.gamma"), &bn.gamma));
                    out.push((format!("layers.{i}.bn.beta"), &bn.beta));
                    out.push((format!("layers.{i}.bn.running_mean"), &bn.running_mean));
                    out.push((format!("layers.{i}.bn.running_var"), &bn.running_var));
                }
            }
        }
        if let Some(r) = &self.regression {
            out.push(("regression.weight".into(), &r.weights));
            out.push(("regression.bias".into(), &r.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Some(c) = &mut layer.conv {
                out.push((format!("layers.{i}.weight"), &mut c.weight));
                if let Some(b) = &mut c.bias {
                    out.push((format!("layers.{i}.bias"), b));
                }
                if let Some(bn) = &mut c.bn {
                    out.push((format!("layers.{i}.bn.gamma"), &mut bn.gamma));
                    out.push((format!("layers.{i}.bn.beta"), &mut bn.beta));
                    out.push((format!("layers.{i}.bn.running_mean"), &mut bn.running_mean));
                    out.push((format!("layers.{i}.bn.running_var"), &mut bn.running_var));
                }
            }
        }
        if let Some(r) = &mut self.regression {
            out.push(("regression.weight".into(), &mut r.weights));
            out.push(("regression.bias".into(), &mut r.bias));
        }
        out
    }

    /// Places every trainable parameter on `g` in canonical order.
    pub fn bind_params(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|(_, _, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        match shape {
            &[_, 3, h, w] if h == s && w == s => Ok(()),
            _ => Err(Error::Dimension(format!(
                "images must be [B, 3, {s}, {s}], got {shape:?}"
            ))),
        }
    }

    /// Records the forward pass on `g`.
    ///
    /// `params` must come from [`ShapedNetModel::bind_params`]. When `cached`
    /// holds a tensor for a layer, that value is used as a constant instead of
    /// recomputing the layer. `dropout_rng` enables dropout on the regression
    /// input (training only).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        images: Var,
        params: &[Var],
        mode: NormMode,
        cached: Option<&[Option<Tensor>]>,
        dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<ForwardVars> {
        self.check_images(g.shape(images))?;
        let cfg = &self.config;
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut heads: [Option<Var>; 3] = [None; 3];
        let mut batch_stats = Vec::new();
        let mut cursor = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            let n_params = match &layer.conv {
                Some(c) => 1 + c.bias.is_some() as usize + 2 * c.bn.is_some() as usize,
                None => 0,
            };
            let p = &params[cursor..cursor + n_params];
            cursor += n_params;

            if let Some(t) = cached.and_then(|c| c[i].as_ref()) {
                let v = g.constant(t.clone());
                if let LayerSpec::Detection { scale } = layer.spec {
                    heads[scale] = Some(v);
                }
                outputs.push(v);
                continue;
            }

            let prev = if i == 0 { images } else { outputs[i - 1] };
            let out = match (&layer.spec, &layer.conv) {
                (LayerSpec::Conv { size, stride, .. }, Some(c)) => {
                    let y = g.conv2d(prev, p[0], *stride, size / 2)?;
                    match &c.bn {
                        Some(bn) => {
                            let y = match mode {
                                NormMode::Train => {
                                    let (y, stats) = g.batch_norm_train(y, p[1], p[2], cfg.bn_eps)?;
                                    batch_stats.push((i, stats));
                                    y
                                }
                                NormMode::Infer => g.batch_norm_infer(
                                    y,
                                    p[1],
                                    p[2],
                                    bn.running_mean.data(),
                                    bn.running_var.data(),
                                    cfg.bn_eps,
                                )?,
                            };
                            g.leaky_relu(y, cfg.leaky_slope)?
                        }
                        None => g.channel_bias(y, p[1])?,
                    }
                }
                (LayerSpec::Shortcut { from }, _) => g.add(prev, outputs[*from])?,
                (LayerSpec::Route { sources }, _) => match sources.as_slice() {
                    [one] => outputs[*one],
                    [a, b] => g.concat_channels(outputs[*a], outputs[*b])?,
                    _ => return Err(Error::Config("route supports one or two sources".into())),
                },
                (LayerSpec::Upsample, _) => g.upsample_nearest2x(prev)?,
                (LayerSpec::Detection { scale }, _) => {
                    let v = g.head_layout(prev, ANCHORS_PER_HEAD, cfg.attrs())?;
                    heads[*scale] = Some(v);
                    v
                }
                (LayerSpec::Conv { .. }, None) => {
                    return Err(Error::Config(format!("conv layer {i} has no parameters")))
                }
            };
            outputs.push(out);
        }

        let bf = match &self.regression {
            Some(_) => {
                let mut y = g.flatten_batch(outputs[BACKBONE_END]);
                if let (Some(rng), NormMode::Train) = (dropout_rng, mode) {
                    y = g.dropout(y, cfg.dropout, &mut RngAdapter(rng))?;
                }
                Some(g.dense(y, params[cursor], params[cursor + 1])?)
            }
            None => None,
        };
        Ok(ForwardVars {
            heads: heads.map(|h| h.expect("three detection layers")),
            bf,
            layer_outputs: outputs,
            batch_stats,
        })
    }

    /// Inference-mode forward pass. `images` is `[B, 3, S, S]` in `[0, 1]`.
    pub fn forward(&self, images: &Tensor) -> Result<RawOutputs> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let params = self.bind_params(&mut g, false);
        let fv = self.forward_graph(&mut g, x, &params, NormMode::Infer, None, None)?;
        let heads = fv.heads.map(|h| g.value(h).clone());
        let bf = fv.bf.map(|b| g.value(b).clone());
        Ok(RawOutputs { heads, bf })
    }

    /// Layers whose output changes when layer `changed`'s parameters change.
    pub fn dependents(&self, changed: usize) -> Vec<bool> {
        let mut dirty = vec![false; self.layers.len()];
        dirty[changed] = true;
        for j in changed + 1..self.layers.len() {
            dirty[j] = self.layers[j]
                .spec
                .inputs(j)
                .into_iter()
                .any(|s| s.is_some_and(|s| dirty[s]));
        }
        dirty
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (i, s) in stats {
            if let Some(bn) = self.layers[*i].conv.as_mut().and_then(|c| c.bn.as_mut()) {
                for (r, v) in bn.running_mean.data_mut().iter_mut().zip(&s.mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                for (r, v) in bn.running_var.data_mut().iter_mut().zip(&s.var) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
        }
    }
}

/// Lets a `dyn RngCore` satisfy the `Rng` bound of the engine's dropout.
struct RngAdapter<'a>(&'a mut dyn rand::RngCore);

impl rand::RngCore for RngAdapter<'_> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Fills a tensor with uniform noise in `[lo, hi)`; handy for smoke inputs.
pub fn random_images(batch: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = batch * 3 * size * size;
    Tensor::from_parts(
        vec![batch, 3, size, size],
        (0..n).map(|_| rng.random::<f64>()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(input: usize, mult: f64) -> NetworkConfig {
        NetworkConfig {
            input_size: input,
            channel_mult: mult,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn full_scale_shape_report() {
        let r = shape_report(&NetworkConfig::default()).unwrap();
        assert_eq!(r.regression_input, (1024, 13, 13));
        assert_eq!(r.flatten_len, 173_056);
        assert_eq!(r.head_grids, [13, 26, 52]);
        assert_eq!(r.backbone_convs, 52);
        assert_eq!(r.regression_path_weighted_layers(), 53);
        assert_eq!(r.layers.len(), 107);
        for (idx, grid) in [(82, 13), (94, 26), (106, 52)] {
            assert_eq!(r.layers[idx].kind, "detection");
            assert_eq!(r.layers[idx].output, (18, grid, grid));
        }
        for &b in &HEAD_BRANCH_LAYERS {
            assert_eq!(r.layers[b].kind, "conv");
        }
        assert!(r.to_string().contains("flatten: 173056"));
    }

    #[test]
    fn toy_shape_report() {
        let r = shape_report(&toy(64, 0.125)).unwrap();
        assert_eq!(r.regression_input, (128, 2, 2));
        assert_eq!(r.flatten_len, 512);
        assert_eq!(r.head_grids, [2, 4, 8]);
    }

    #[test]
    fn rejects_bad_input_size() {
        assert!(matches!(shape_report(&toy(100, 1.0)), Err(Error::Config(_))));
        assert!(build_network(toy(48, 0.125), 0).is_err());
    }

    #[test]
    fn full_scale_regression_input_size() {
        let m = build_network(NetworkConfig::default(), 1).unwrap();
        let r = m.regression.as_ref().unwrap();
        assert_eq!(r.weights.shape(), &[1, 173_056]);
        let backbone = m.layers[..=BACKBONE_END].iter().filter(|l| l.conv.is_some()).count();
        assert_eq!(backbone + 1, 53);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_network(toy(64, 0.125), 11).unwrap();
        let b = build_network(toy(64, 0.125), 11).unwrap();
        let c = build_network(toy(64, 0.125), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_head_shapes_and_determinism() {
        let m = build_network(toy(64, 0.125), 3).unwrap();
        let x = random_images(2, 64, 5);
        let out = m.forward(&x).unwrap();
        assert_eq!(out.heads[0].shape(), &[2, 2, 2, 3, 6]);
        assert_eq!(out.heads[1].shape(), &[2, 4, 4, 3, 6]);
        assert_eq!(out.heads[2].shape(), &[2, 8, 8, 3, 6]);
        assert_eq!(out.bf.as_ref().unwrap().shape(), &[2, 1]);
        assert!(out.heads.iter().all(|h| h.is_finite()));
        assert_eq!(out, m.forward(&x).unwrap());
        assert!(m.forward(&random_images(1, 32, 5)).is_err());
    }

    #[test]
    fn zero_regression_weights_give_zero_bf() {
        let mut m = build_network(toy(64, 0.125), 3).unwrap();
        let r = m.regression.as_mut().unwrap();
        r.weights = Tensor::zeros(r.weights.shape());
        let out = m.forward(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(out.bf.unwrap().data(), &[0.0]);
    }

    #[test]
    fn regression_branch_is_purely_additive() {
        let with = build_network(toy(64, 0.125), 8).unwrap();
        let mut without = with.clone();
        without.config.regression_branch = false;
        without.regression = None;
        let x = random_images(2, 64, 1);
        let a = with.forward(&x).unwrap();
        let b = without.forward(&x).unwrap();
        assert_eq!(a.heads, b.heads);
        assert!(b.bf.is_none());
    }

    #[test]
    fn shape_report_agrees_with_forward_pass() {
        for input in [32, 64, 96, 128] {
            for mult in [0.125, 0.25] {
                let cfg = toy(input, mult);
                let report = shape_report(&cfg).unwrap();
                let m = build_network(cfg, 0).unwrap();
                let mut g = Graph::new();
                let x = g.constant(random_images(1, input, 0));
                let p = m.bind_params(&mut g, false);
                let fv = m.forward_graph(&mut g, x, &p, NormMode::Infer, None, None).unwrap();
                for (l, v) in report.layers.iter().zip(&fv.layer_outputs) {
                    let s = g.shape(*v);
                    let actual = if let LayerSpec::Detection { .. } = m.layers[l.index].spec {
                        (s[3] * s[4], s[1], s[2])
                    } else {
                        (s[1], s[2], s[3])
                    };
                    assert_eq!(actual, l.output, "input {input} mult {mult} layer {}", l.index);
                }
                assert_eq!(m.num_params(), report.total_params);
                assert_eq!(g.shape(fv.bf.unwrap()), &[1, 1]);
            }
        }
    }

    #[test]
    fn dependents_follow_routes() {
        let m = build_network(toy(32, 0.125), 0).unwrap();
        let d = m.dependents(BACKBONE_END);
        assert!(!d[61] && d[75] && d[106]);
        let d = m.dependents(61);
        assert!(d[62] && d[86] && !d[36]);
        let d = m.dependents(105);
        assert_eq!(d.iter().filter(|&&x| x).count(), 2);
    }
}
