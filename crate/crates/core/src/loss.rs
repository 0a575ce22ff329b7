//! Multi-part detection loss plus the relative body-fat error term.
//!
//! Every term is a scalar node on the engine graph. Detection terms sum over
//! grid slots (heads in stride 32, 16, 8 order, slots in storage order) and
//! divide by the batch size; the body-fat term is the batch mean.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::architecture::{NetworkConfig, RawOutputs, ANCHORS_PER_HEAD};
use crate::engine::{sigmoid, Graph, LocalGrad, Var, NO_TARGET};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Valid range of a body-fat target, in percent.
pub const BFP_TARGET_RANGE: (f64, f64) = (9.0, 60.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub lambda_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            lambda_f: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_coord", self.lambda_coord),
            ("lambda_noobj", self.lambda_noobj),
            ("lambda_f", self.lambda_f),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the relative body-fat error enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BfLossMode {
    /// `λ_f (b − b̂) / b`, unbounded below.
    Signed,
    #[default]
    Absolute,
    Squared,
}

impl FromStr for BfLossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed" => Ok(Self::Signed),
            "absolute" => Ok(Self::Absolute),
            "squared" => Ok(Self::Squared),
            _ => Err(Error::Config(format!(
                "unknown bf loss mode {s:?} (expected signed, absolute or squared)"
            ))),
        }
    }
}

impl fmt::Display for BfLossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Signed => "signed",
            Self::Absolute => "absolute",
            Self::Squared => "squared",
        })
    }
}

/// A ground-truth box in normalized center format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTarget {
    pub objects: Vec<ObjectBox>,
    pub bfp: f64,
}

/// Targets for one head. Slot `((b·S + row)·S + col)·3 + a` matches the
/// `[B, S, S, 3, K]` head layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTarget {
    pub grid: usize,
    pub obj: Vec<bool>,
    /// Per slot: (x offset in cell, y offset in cell, w, h).
    pub boxes: Vec<[f64; 4]>,
    pub class_id: Vec<usize>,
}

impl ScaleTarget {
    fn empty(batch: usize, grid: usize) -> Self {
        let n = batch * grid * grid * ANCHORS_PER_HEAD;
        Self {
            grid,
            obj: vec![false; n],
            boxes: vec![[0.0; 4]; n],
            class_id: vec![0; n],
        }
    }

    pub fn slot(&self, image: usize, row: usize, col: usize, anchor: usize) -> usize {
        ((image * self.grid + row) * self.grid + col) * ANCHORS_PER_HEAD + anchor
    }

    /// The no-object mask is the complement of the object mask.
    pub fn noobj(&self, slot: usize) -> bool {
        !self.obj[slot]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridTarget {
    pub batch: usize,
    pub num_classes: usize,
    pub scales: [ScaleTarget; 3],
    pub bfp: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub coord_xy: f64,
    pub coord_wh: f64,
    pub obj_conf: f64,
    pub noobj_conf: f64,
    pub classification: f64,
    pub bodyfat: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Terms in summation order, with their names.
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("coord_xy", self.coord_xy),
            ("coord_wh", self.coord_wh),
            ("obj_conf", self.obj_conf),
            ("noobj_conf", self.noobj_conf),
            ("classification", self.classification),
            ("bodyfat", self.bodyfat),
        ]
    }
}

/// IoU of two boxes sharing a center.
pub fn centered_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

/// Places every object at the single (cell, anchor) slot of its best-IoU
/// anchor among all nine.
pub fn assign_targets(targets: &[DetectionTarget], config: &NetworkConfig) -> Result<GridTarget> {
    let batch = targets.len();
    if batch == 0 {
        return Err(Error::Data("no targets to assign".into()));
    }
    let grids = config.head_grids();
    let mut scales = grids.map(|s| ScaleTarget::empty(batch, s));
    let mut bfp = Vec::with_capacity(batch);
    for (b, t) in targets.iter().enumerate() {
        if !(t.bfp >= BFP_TARGET_RANGE.0 && t.bfp <= BFP_TARGET_RANGE.1) {
            return Err(Error::Data(format!(
                "image {b}: bfp {} outside [{}, {}]",
                t.bfp, BFP_TARGET_RANGE.0, BFP_TARGET_RANGE.1
            )));
        }
        bfp.push(t.bfp);
        for o in &t.objects {
            if !(o.w > 0.0 && o.h > 0.0) {
                return Err(Error::Data(format!("image {b}: degenerate box {o:?}")));
            }
            if !(o.w <= 1.0 && o.h <= 1.0 && (0.0..=1.0).contains(&o.x) && (0.0..=1.0).contains(&o.y)) {
                return Err(Error::Data(format!("image {b}: box {o:?} outside the unit square")));
            }
            if o.class_id >= config.num_classes {
                return Err(Error::Data(format!(
                    "image {b}: class {} but only {} classes",
                    o.class_id, config.num_classes
                )));
            }
            let mut best = 0;
            let mut best_iou = f64::NEG_INFINITY;
            for (k, &a) in config.anchors.iter().enumerate() {
                let iou = centered_iou((o.w, o.h), a);
                if iou > best_iou {
                    best_iou = iou;
                    best = k;
                }
            }
            let scale = 2 - best / ANCHORS_PER_HEAD;
            let anchor = best % ANCHORS_PER_HEAD;
            let st = &mut scales[scale];
            let s = st.grid as f64;
            let col = ((o.x * s).floor() as usize).min(st.grid - 1);
            let row = ((o.y * s).floor() as usize).min(st.grid - 1);
            let slot = st.slot(b, row, col, anchor);
            st.obj[slot] = true;
            st.boxes[slot] = [o.x * s - col as f64, o.y * s - row as f64, o.w, o.h];
            st.class_id[slot] = o.class_id;
        }
    }
    Ok(GridTarget {
        batch,
        num_classes: config.num_classes,
        scales,
        bfp,
    })
}

/// Relative body-fat error for a single subject.
pub fn bf_loss(b: f64, b_hat: f64, lambda_f: f64, mode: BfLossMode) -> Result<f64> {
    Ok(bf_term(b, b_hat, lambda_f, mode)?.0)
}

/// Value and derivative with respect to `b_hat`.
fn bf_term(b: f64, b_hat: f64, lambda_f: f64, mode: BfLossMode) -> Result<(f64, f64)> {
    if !(b > 0.0) {
        return Err(Error::Data(format!("body-fat target must be > 0, got {b}")));
    }
    let r = (b - b_hat) / b;
    Ok(match mode {
        BfLossMode::Signed => (lambda_f * r, -lambda_f / b),
        BfLossMode::Absolute => {
            let sign = if b_hat > b {
                1.0
            } else if b_hat < b {
                -1.0
            } else {
                0.0
            };
            (lambda_f * r.abs(), lambda_f * sign / b)
        }
        BfLossMode::Squared => (lambda_f * r * r, -2.0 * lambda_f * r / b),
    })
}

/// Scalar nodes of every loss term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub coord_xy: Var,
    pub coord_wh: Var,
    pub obj_conf: Var,
    pub noobj_conf: Var,
    pub classification: Var,
    pub bodyfat: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            coord_xy: v(self.coord_xy),
            coord_wh: v(self.coord_wh),
            obj_conf: v(self.obj_conf),
            noobj_conf: v(self.noobj_conf),
            classification: v(self.classification),
            bodyfat: v(self.bodyfat),
            total: v(self.total),
        }
    }
}

const XY: usize = 0;
const WH: usize = 1;
const OBJ: usize = 2;
const NOOBJ: usize = 3;
const CLASS: usize = 4;

/// Records the five detection terms on `g`.
pub fn detection_loss_graph(
    g: &mut Graph,
    heads: [Var; 3],
    target: &GridTarget,
    weights: &LossWeights,
    config: &NetworkConfig,
) -> Result<[Var; 5]> {
    weights.validate()?;
    let attrs = 5 + target.num_classes;
    let inv_batch = 1.0 / target.batch as f64;
    let mut sums = [0.0; 5];
    let mut locals: [Vec<LocalGrad>; 5] = Default::default();
    for (scale, &head) in heads.iter().enumerate() {
        let st = &target.scales[scale];
        let expected = [target.batch, st.grid, st.grid, ANCHORS_PER_HEAD, attrs];
        if g.shape(head) != expected {
            return Err(Error::Dimension(format!(
                "head {scale} has shape {:?}, targets expect {expected:?}",
                g.shape(head)
            )));
        }
        let raw = g.value(head).data();
        let anchors = config.head_anchors(scale);
        let n = raw.len();
        let mut derivs: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
        for slot in 0..st.obj.len() {
            let base = slot * attrs;
            let t = &raw[base..base + attrs];
            let so = sigmoid(t[4]);
            let dso = so * (1.0 - so);
            if st.obj[slot] {
                let [gx, gy, gw, gh] = st.boxes[slot];
                let (aw, ah) = anchors[slot % ANCHORS_PER_HEAD];
                let lc = weights.lambda_coord;

                let sx = sigmoid(t[0]);
                let sy = sigmoid(t[1]);
                sums[XY] += lc * ((sx - gx) * (sx - gx) + (sy - gy) * (sy - gy));
                derivs[XY][base] = lc * 2.0 * (sx - gx) * sx * (1.0 - sx) * inv_batch;
                derivs[XY][base + 1] = lc * 2.0 * (sy - gy) * sy * (1.0 - sy) * inv_batch;

                let rw = aw.sqrt() * (0.5 * t[2]).exp();
                let rh = ah.sqrt() * (0.5 * t[3]).exp();
                if !(rw.is_finite() && rh.is_finite()) {
                    return Err(Error::Evaluation(format!(
                        "head {scale} slot {slot}: predicted box size overflowed"
                    )));
                }
                let dw = gw.sqrt() - rw;
                let dh = gh.sqrt() - rh;
                sums[WH] += lc * (dw * dw + dh * dh);
                derivs[WH][base + 2] = -lc * dw * rw * inv_batch;
                derivs[WH][base + 3] = -lc * dh * rh * inv_batch;

                sums[OBJ] += (1.0 - so) * (1.0 - so);
                derivs[OBJ][base + 4] = -2.0 * (1.0 - so) * dso * inv_batch;

                for c in 0..target.num_classes {
                    let p = if st.class_id[slot] == c { 1.0 } else { 0.0 };
                    let sc = sigmoid(t[5 + c]);
                    sums[CLASS] += (p - sc) * (p - sc);
                    derivs[CLASS][base + 5 + c] = 2.0 * (sc - p) * sc * (1.0 - sc) * inv_batch;
                }
            } else {
                let ln = weights.lambda_noobj;
                sums[NOOBJ] += ln * so * so;
                derivs[NOOBJ][base + 4] = ln * 2.0 * so * dso * inv_batch;
            }
        }
        for (term, d) in derivs.into_iter().enumerate() {
            let target_idx = d.iter().map(|&x| if x != 0.0 { 0 } else { NO_TARGET }).collect();
            locals[term].push(LocalGrad {
                input: head,
                target: target_idx,
                deriv: d,
            });
        }
    }
    let mut out = Vec::with_capacity(5);
    for (term, grads) in locals.into_iter().enumerate() {
        out.push(g.custom(Tensor::scalar(sums[term] * inv_batch), grads)?);
    }
    Ok([out[0], out[1], out[2], out[3], out[4]])
}

/// Records the batch-mean body-fat term on `g` (zero when there is no branch).
pub fn bodyfat_loss_graph(
    g: &mut Graph,
    bf: Option<Var>,
    target: &GridTarget,
    weights: &LossWeights,
    mode: BfLossMode,
) -> Result<Var> {
    let Some(bf) = bf else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    if g.shape(bf) != [target.batch, 1] {
        return Err(Error::Dimension(format!(
            "bf output has shape {:?}, expected [{}, 1]",
            g.shape(bf),
            target.batch
        )));
    }
    let inv_batch = 1.0 / target.batch as f64;
    let mut sum = 0.0;
    let mut deriv = Vec::with_capacity(target.batch);
    let preds = g.value(bf).data().to_vec();
    for (&b, &b_hat) in target.bfp.iter().zip(&preds) {
        let (v, d) = bf_term(b, b_hat, weights.lambda_f, mode)?;
        sum += v;
        deriv.push(d * inv_batch);
    }
    if mode == BfLossMode::Absolute {
        g.note_kinks(target.bfp.iter().zip(&preds).map(|(b, p)| p > b));
    }
    g.custom(
        Tensor::scalar(sum * inv_batch),
        vec![LocalGrad {
            input: bf,
            target: vec![0; target.batch],
            deriv,
        }],
    )
}

/// Records the full objective: the five detection terms plus the body-fat
/// term, summed in that order.
pub fn total_loss_graph(
    g: &mut Graph,
    heads: [Var; 3],
    bf: Option<Var>,
    target: &GridTarget,
    weights: &LossWeights,
    mode: BfLossMode,
    config: &NetworkConfig,
) -> Result<LossVars> {
    let [coord_xy, coord_wh, obj_conf, noobj_conf, classification] =
        detection_loss_graph(g, heads, target, weights, config)?;
    let bodyfat = bodyfat_loss_graph(g, bf, target, weights, mode)?;
    let total = g.sum_scalars(&[coord_xy, coord_wh, obj_conf, noobj_conf, classification, bodyfat]);
    Ok(LossVars {
        coord_xy,
        coord_wh,
        obj_conf,
        noobj_conf,
        classification,
        bodyfat,
        total,
    })
}

/// The five detection terms for already computed outputs, with the
/// body-fat and total fields left at zero.
pub fn detection_loss(
    pred: &RawOutputs,
    target: &GridTarget,
    weights: &LossWeights,
    config: &NetworkConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let heads = pred.heads.clone().map(|h| g.constant(h));
    let t = detection_loss_graph(&mut g, heads, target, weights, config)?;
    let v = |x: Var| g.value(x).data()[0];
    Ok(LossBreakdown {
        coord_xy: v(t[XY]),
        coord_wh: v(t[WH]),
        obj_conf: v(t[OBJ]),
        noobj_conf: v(t[NOOBJ]),
        classification: v(t[CLASS]),
        ..LossBreakdown::default()
    })
}

pub fn total_loss(
    pred: &RawOutputs,
    target: &GridTarget,
    weights: &LossWeights,
    mode: BfLossMode,
    config: &NetworkConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let heads = pred.heads.clone().map(|h| g.constant(h));
    let bf = pred.bf.clone().map(|b| g.constant(b));
    let vars = total_loss_graph(&mut g, heads, bf, target, weights, mode, config)?;
    Ok(vars.breakdown(&g))
}

/// Raw head values that decode exactly to a target slot's box, with the
/// given objectness and class logits. Inverse of the decode used in the loss.
pub fn encode_box(offset: (f64, f64), size: (f64, f64), anchor: (f64, f64)) -> [f64; 4] {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    [
        logit(offset.0),
        logit(offset.1),
        (size.0 / anchor.0).ln(),
        (size.1 / anchor.1).ln(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architecture::NetworkConfig;
    use crate::engine::grad_check_many;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            input_size: 64,
            channel_mult: 0.125,
            ..NetworkConfig::default()
        }
    }

    fn one_target(x: f64, y: f64, w: f64, h: f64, bfp: f64) -> DetectionTarget {
        DetectionTarget {
            objects: vec![ObjectBox {
                x,
                y,
                w,
                h,
                class_id: 0,
            }],
            bfp,
        }
    }

    fn responsible(t: &GridTarget) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (s, st) in t.scales.iter().enumerate() {
            for (i, &o) in st.obj.iter().enumerate() {
                if o {
                    out.push((s, i));
                }
            }
        }
        out
    }

    /// Raw outputs whose decode matches the targets: confident objects on
    /// responsible slots, confident background elsewhere.
    fn perfect(t: &GridTarget, c: &NetworkConfig) -> RawOutputs {
        let attrs = 5 + t.num_classes;
        let heads = std::array::from_fn(|s| {
            let st = &t.scales[s];
            let mut data = vec![0.0; st.obj.len() * attrs];
            for slot in 0..st.obj.len() {
                let r = &mut data[slot * attrs..(slot + 1) * attrs];
                if st.obj[slot] {
                    let [ox, oy, w, h] = st.boxes[slot];
                    let a = c.head_anchors(s)[slot % 3];
                    r[..4].copy_from_slice(&encode_box((ox, oy), (w, h), a));
                    r[4] = 800.0;
                    for k in 0..t.num_classes {
                        r[5 + k] = if k == st.class_id[slot] { 800.0 } else { -800.0 };
                    }
                } else {
                    r[4] = -800.0;
                }
            }
            Tensor::new(vec![t.batch, st.grid, st.grid, 3, attrs], data).unwrap()
        });
        let bf = Tensor::new(vec![t.batch, 1], t.bfp.clone()).unwrap();
        RawOutputs { heads, bf: Some(bf) }
    }

    #[test]
    fn centered_box_on_two_by_two_grid() {
        let mut c = NetworkConfig {
            anchors: [(0.1, 0.1); 9],
            ..cfg()
        };
        c.anchors[6] = (0.4, 0.6);
        let t = assign_targets(&[one_target(0.5, 0.5, 0.4, 0.6, 20.0)], &c).unwrap();
        let r = responsible(&t);
        assert_eq!(r.len(), 1);
        let (scale, slot) = r[0];
        assert_eq!(scale, 0);
        assert_eq!(t.scales[0].grid, 2);
        assert_eq!(slot, t.scales[0].slot(0, 1, 1, 0));
        assert_eq!(t.scales[0].boxes[slot], [0.0, 0.0, 0.4, 0.6]);
    }

    #[test]
    fn no_boxes_means_all_noobj() {
        let t = assign_targets(
            &[DetectionTarget {
                objects: vec![],
                bfp: 30.0,
            }],
            &cfg(),
        )
        .unwrap();
        assert!(t.scales.iter().all(|s| s.obj.iter().all(|&o| !o)));
        assert!(t.scales.iter().all(|s| (0..s.obj.len()).all(|i| s.noobj(i))));
    }

    #[test]
    fn exact_anchor_match_is_responsible() {
        let c = cfg();
        for k in 0..9 {
            let (w, h) = c.anchors[k];
            let t = assign_targets(&[one_target(0.3, 0.7, w, h, 25.0)], &c).unwrap();
            let r = responsible(&t);
            assert_eq!(r.len(), 1);
            let (scale, slot) = r[0];
            assert_eq!(scale, 2 - k / 3);
            assert_eq!(slot % 3, k % 3);
        }
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(matches!(
            assign_targets(&[one_target(0.5, 0.5, 0.0, 0.2, 20.0)], &cfg()),
            Err(Error::Data(_))
        ));
        assert!(assign_targets(&[one_target(1.5, 0.5, 0.1, 0.2, 20.0)], &cfg()).is_err());
        assert!(assign_targets(&[one_target(0.5, 0.5, 0.1, 0.2, 5.0)], &cfg()).is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let c = cfg();
        let targets = [
            one_target(0.41, 0.52, 0.3, 0.7, 22.0),
            one_target(0.6, 0.45, 0.05, 0.1, 41.0),
        ];
        let t = assign_targets(&targets, &c).unwrap();
        let p = perfect(&t, &c);
        for mode in [BfLossMode::Absolute, BfLossMode::Squared, BfLossMode::Signed] {
            let l = total_loss(&p, &t, &LossWeights::default(), mode, &c).unwrap();
            for (name, v) in l.terms() {
                assert!(v.abs() < 1e-24, "{name} = {v}");
            }
            assert!(l.total.abs() < 1e-24);
        }
    }

    #[test]
    fn single_x_offset_gives_lambda_coord_delta_squared() {
        let c = cfg();
        let t = assign_targets(&[one_target(0.41, 0.52, 0.3, 0.7, 22.0)], &c).unwrap();
        let mut p = perfect(&t, &c);
        let (scale, slot) = responsible(&t)[0];
        let delta = 0.05;
        let ox = t.scales[scale].boxes[slot][0];
        let idx = slot * 6;
        p.heads[scale].data_mut()[idx] = ((ox + delta) / (1.0 - ox - delta)).ln();
        let l = detection_loss(&p, &t, &LossWeights::default(), &c).unwrap();
        assert_relative_eq!(l.coord_xy, 5.0 * delta * delta, max_relative = 1e-12);
        assert!(l.coord_wh.abs() < 1e-24 && l.obj_conf.abs() < 1e-24);
    }

    #[test]
    fn noobj_term_is_linear_in_its_weight() {
        let c = cfg();
        let t = assign_targets(&[one_target(0.41, 0.52, 0.3, 0.7, 22.0)], &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heads = std::array::from_fn(|s| {
            let st = &t.scales[s];
            let n = st.obj.len() * 6;
            Tensor::new(
                vec![1, st.grid, st.grid, 3, 6],
                (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap()
        });
        let p = RawOutputs { heads, bf: None };
        let w1 = LossWeights::default();
        let w2 = LossWeights {
            lambda_noobj: 2.0 * w1.lambda_noobj,
            ..w1
        };
        let a = detection_loss(&p, &t, &w1, &c).unwrap();
        let b = detection_loss(&p, &t, &w2, &c).unwrap();
        assert_eq!(b.noobj_conf, 2.0 * a.noobj_conf);
        assert_eq!(
            (a.coord_xy, a.coord_wh, a.obj_conf, a.classification),
            (b.coord_xy, b.coord_wh, b.obj_conf, b.classification)
        );
    }

    #[test]
    fn bf_loss_examples() {
        for mode in [BfLossMode::Signed, BfLossMode::Absolute, BfLossMode::Squared] {
            assert_eq!(bf_loss(20.0, 20.0, 1.0, mode).unwrap(), 0.0);
        }
        assert_relative_eq!(
            bf_loss(20.0, 18.0, 1.0, BfLossMode::Signed).unwrap(),
            0.1,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            bf_loss(20.0, 22.0, 1.0, BfLossMode::Absolute).unwrap(),
            0.1,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            bf_loss(20.0, 22.0, 1.0, BfLossMode::Squared).unwrap(),
            0.01,
            max_relative = 1e-14
        );
        assert!(bf_loss(20.0, 22.0, 1.0, BfLossMode::Signed).unwrap() < 0.0);
        assert!(matches!(
            bf_loss(0.0, 1.0, 1.0, BfLossMode::Absolute),
            Err(Error::Data(_))
        ));
        assert_eq!("squared".parse::<BfLossMode>().unwrap(), BfLossMode::Squared);
        assert!("l1".parse::<BfLossMode>().is_err());
    }

    fn random_case(seed: u64) -> (NetworkConfig, GridTarget, RawOutputs) {
        let c = NetworkConfig {
            input_size: 32,
            channel_mult: 0.125,
            num_classes: 2,
            ..NetworkConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<DetectionTarget> = (0..2)
            .map(|_| DetectionTarget {
                objects: (0..rng.random_range(0..3))
                    .map(|_| ObjectBox {
                        x: rng.random_range(0.0..1.0),
                        y: rng.random_range(0.0..1.0),
                        w: rng.random_range(0.01..1.0),
                        h: rng.random_range(0.01..1.0),
                        class_id: rng.random_range(0..2),
                    })
                    .collect(),
                bfp: rng.random_range(9.3..57.6),
            })
            .collect();
        let t = assign_targets(&targets, &c).unwrap();
        let heads = std::array::from_fn(|s| {
            let g = t.scales[s].grid;
            let n = 2 * g * g * 3 * 7;
            Tensor::new(
                vec![2, g, g, 3, 7],
                (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
            )
            .unwrap()
        });
        let bf = Tensor::new(
            vec![2, 1],
            vec![rng.random_range(0.0..70.0), rng.random_range(0.0..70.0)],
        )
        .unwrap();
        (c, t, RawOutputs { heads, bf: Some(bf) })
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..5 {
            let (c, t, p) = random_case(seed);
            for mode in [BfLossMode::Signed, BfLossMode::Absolute, BfLossMode::Squared] {
                let params = [
                    p.heads[0].clone(),
                    p.heads[1].clone(),
                    p.heads[2].clone(),
                    p.bf.clone().unwrap(),
                ];
                let r = grad_check_many(
                    |g, v| {
                        let l =
                            total_loss_graph(g, [v[0], v[1], v[2]], Some(v[3]), &t, &LossWeights::default(), mode, &c)?;
                        Ok(l.total)
                    },
                    &params,
                    1e-5,
                )
                .unwrap();
                assert!(r.max_relative_error <= 1e-5, "seed {seed} {mode}: {r:?}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn total_is_bit_exact_sum_of_terms(seed in any::<u64>()) {
            let (c, t, p) = random_case(seed);
            for mode in [BfLossMode::Signed, BfLossMode::Absolute, BfLossMode::Squared] {
                let l = total_loss(&p, &t, &LossWeights::default(), mode, &c).unwrap();
                let sum = ((((l.coord_xy + l.coord_wh) + l.obj_conf) + l.noobj_conf) + l.classification) + l.bodyfat;
                prop_assert_eq!(l.total.to_bits(), sum.to_bits());
                if mode != BfLossMode::Signed {
                    prop_assert!(l.terms().iter().all(|(_, v)| *v >= 0.0));
                }
            }
        }

        #[test]
        fn absolute_bf_term_is_monotone(b in 9.3f64..57.6, d1 in 0.0f64..40.0, d2 in 0.0f64..40.0, up in any::<bool>()) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let s = if up { 1.0 } else { -1.0 };
            let a = bf_loss(b, b + s * lo, 1.0, BfLossMode::Absolute).unwrap();
            let c = bf_loss(b, b + s * hi, 1.0, BfLossMode::Absolute).unwrap();
            prop_assert!(c >= a);
        }
    }
}
