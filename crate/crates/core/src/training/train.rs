//! The training loop, its configuration and the per-epoch log.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::{adam_step, lr_at, AdamConfig, AdamState};
use crate::architecture::ShapedNetModel;
use crate::data::Dataset;
use crate::engine::{Graph, NormMode};
use crate::error::{Error, Result};
use crate::loss::{assign_targets, total_loss_graph, BfLossMode, LossBreakdown, LossWeights};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub bf_loss_mode: BfLossMode,
    pub loss_weights: LossWeights,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub grad_clip: Option<f64>,
    /// Random horizontal flips of training images.
    pub hflip: bool,
    /// Start the regression bias at the mean training BFP.
    pub init_bf_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            warmup_epochs: 2,
            lr_init: 1e-4,
            lr_min: 0.0,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
            bf_loss_mode: BfLossMode::Absolute,
            loss_weights: LossWeights::default(),
            grad_clip: None,
            hflip: false,
            init_bf_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup epochs ({}) must be fewer than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr_min >= 0.0 && self.lr_init > self.lr_min && self.lr_init.is_finite()) {
            return bad(format!(
                "need lr_init > lr_min >= 0, got lr_init {} and lr_min {}",
                self.lr_init, self.lr_min
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid adam settings {a:?}"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("gradient clip must be > 0, got {c}"));
            }
        }
        self.loss_weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    /// Not serialized, so logs of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation total; 0 when empty.
    pub best_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Summary {
    best_epoch: usize,
}

impl TrainLog {
    /// One JSON object per epoch, then a closing `{"best_epoch": n}` line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("record serializes"));
            out.push('\n');
        }
        let s = Summary {
            best_epoch: self.best_epoch,
        };
        out.push_str(&serde_json::to_string(&s).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let Some((last, body)) = lines.split_last() else {
            return Err(Error::Parse {
                line: 1,
                message: "empty training log".into(),
            });
        };
        let parse_err = |i: usize, e: serde_json::Error| Error::Parse {
            line: i as u64 + 1,
            message: e.to_string(),
        };
        let epochs = body
            .iter()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(i, e)))
            .collect::<Result<Vec<EpochRecord>>>()?;
        let s: Summary = serde_json::from_str(last).map_err(|e| parse_err(body.len(), e))?;
        Ok(Self {
            epochs,
            best_epoch: s.best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::file(path, e))
    }
}

/// 1-based index of the first minimum, `None` for an empty slice.
pub fn best_epoch(val_totals: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in val_totals.iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i + 1)
}

/// Fails with the name of the first non-finite term.
pub fn check_finite(b: &LossBreakdown, context: &str) -> Result<()> {
    for (name, v) in b.terms().into_iter().chain([("total", b.total)]) {
        if !v.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss term {name} = {v} ({context})"
            )));
        }
    }
    Ok(())
}

pub struct TrainOutcome {
    /// Snapshot taken after the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub log: TrainLog,
}

fn check_set(model: &ShapedNetModel, set: &Dataset, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Data(format!("{what} set is empty")));
    }
    if set.image_size != model.config.input_size {
        return Err(Error::Dimension(format!(
            "{what} images are {} px, model expects {}",
            set.image_size, model.config.input_size
        )));
    }
    Ok(())
}

fn scaled(sum: LossBreakdown, n: f64) -> LossBreakdown {
    LossBreakdown {
        coord_xy: sum.coord_xy / n,
        coord_wh: sum.coord_wh / n,
        obj_conf: sum.obj_conf / n,
        noobj_conf: sum.noobj_conf / n,
        classification: sum.classification / n,
        bodyfat: sum.bodyfat / n,
        total: sum.total / n,
    }
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.coord_xy += w * b.coord_xy;
    acc.coord_wh += w * b.coord_wh;
    acc.obj_conf += w * b.obj_conf;
    acc.noobj_conf += w * b.noobj_conf;
    acc.classification += w * b.classification;
    acc.bodyfat += w * b.bodyfat;
    acc.total += w * b.total;
}

/// Per-image mean loss over a dataset with stored batch-norm statistics.
pub fn evaluate_loss(
    model: &ShapedNetModel,
    set: &Dataset,
    weights: &LossWeights,
    mode: BfLossMode,
    batch_size: usize,
) -> Result<LossBreakdown> {
    check_set(model, set, "evaluation")?;
    let order: Vec<usize> = (0..set.len()).collect();
    let mut sum = LossBreakdown::default();
    for chunk in order.chunks(batch_size.max(1)) {
        let (images, targets) = set.batch(chunk, &[]);
        let gt = assign_targets(&targets, &model.config)?;
        let mut g = Graph::new();
        let x = g.constant(images);
        let pv = model.bind_params(&mut g, false);
        let fv = model.forward_graph(&mut g, x, &pv, NormMode::Infer, None, None)?;
        let lv = total_loss_graph(&mut g, fv.heads, fv.bf, &gt, weights, mode, &model.config)?;
        accumulate(&mut sum, &lv.breakdown(&g), chunk.len() as f64);
    }
    Ok(scaled(sum, set.len() as f64))
}

/// Runs `cfg.epochs` epochs of Adam on `model`.
///
/// Each epoch visits the training set in a seeded random order (the last
/// partial batch is kept), normalizes with batch statistics and folds them
/// into the running averages, then scores the validation set with the
/// running averages. `observer` sees every epoch record as it is produced.
pub fn train(
    model: &mut ShapedNetModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_set(model, train_set, "training")?;
    check_set(model, val_set, "validation")?;

    if cfg.init_bf_bias {
        if let Some(r) = &mut model.regression {
            let mean = train_set.records.iter().map(|r| r.bfp).sum::<f64>() / train_set.len() as f64;
            r.bias.data_mut()[0] = mean;
        }
    }

    let n = train_set.len();
    let spe = n.div_ceil(cfg.batch_size);
    let mut state = AdamState::new(model.params().iter().map(|(_, _, t)| t.len()));
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut rng = seeded(derive_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = (0..n).map(|_| cfg.hflip && rng.random_bool(0.5)).collect();

        let mut sum = LossBreakdown::default();
        let mut lr = cfg.lr_init;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = lr_at(step, spe, cfg);
            let flip = &flips[b * cfg.batch_size..b * cfg.batch_size + chunk.len()];
            let (images, targets) = train_set.batch(chunk, flip);
            let gt = assign_targets(&targets, &model.config)?;

            let mut g = Graph::new();
            let x = g.constant(images);
            let pv = model.bind_params(&mut g, true);
            let mut drop_rng = seeded(derive_seed(cfg.seed ^ 0xd50f_0000_0000_0000, step as u64));
            let fv = model.forward_graph(&mut g, x, &pv, NormMode::Train, None, Some(&mut drop_rng))?;
            let lv = total_loss_graph(
                &mut g,
                fv.heads,
                fv.bf,
                &gt,
                &cfg.loss_weights,
                cfg.bf_loss_mode,
                &model.config,
            )?;
            let br = lv.breakdown(&g);
            check_finite(&br, &format!("epoch {}, step {}", epoch + 1, step))?;
            g.backward(lv.total)?;

            let mut grads: Vec<Vec<f64>> = pv
                .iter()
                .zip(model.params())
                .map(|(v, (_, _, t))| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
                .collect();
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    grads.iter_mut().flatten().for_each(|x| *x *= s);
                }
            }
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            adam_step(&mut model.params_mut(), &grad_refs, &mut state, lr, &cfg.adam)?;
            model.update_running_stats(&fv.batch_stats);

            accumulate(&mut sum, &br, chunk.len() as f64);
            step += 1;
        }

        let val = evaluate_loss(model, val_set, &cfg.loss_weights, cfg.bf_loss_mode, cfg.batch_size)?;
        check_finite(&val, &format!("validation after epoch {}", epoch + 1))?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train: scaled(sum, n as f64),
            val,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if best.as_ref().is_none_or(|(b, _)| val.total < *b) {
            best = Some((val.total, Checkpoint::from_model(model)));
            log.best_epoch = epoch + 1;
        }
        observer(&record);
        log.epochs.push(record);
    }

    let (_, best) = best.expect("at least one epoch");
    Ok(TrainOutcome { best, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architecture::{build_network, NetworkConfig};
    use crate::data::{generate_synthetic_dataset, SyntheticSpec};

    fn fixture(dir: &Path) -> Dataset {
        let spec = SyntheticSpec {
            count: 6,
            image_size: 32,
            seed: 4,
            ..SyntheticSpec::default()
        };
        let recs = generate_synthetic_dataset(&spec, dir).unwrap();
        Dataset::load(&recs, dir, 32).unwrap()
    }

    fn model() -> ShapedNetModel {
        build_network(
            NetworkConfig {
                input_size: 32,
                ..NetworkConfig::toy()
            },
            1,
        )
        .unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            warmup_epochs: 1,
            lr_init: 1e-3,
            batch_size: 4,
            seed: 11,
            hflip: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn best_epoch_is_first_argmin() {
        assert_eq!(best_epoch(&[3.0, 2.0, 2.5]), Some(2));
        assert_eq!(best_epoch(&[1.0, 2.0, 1.0]), Some(1));
        assert_eq!(best_epoch(&[]), None);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                epochs: 2,
                warmup_epochs: 2,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr_min: 1e-3,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                grad_clip: Some(0.0),
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 0,
                warmup_epochs: 0,
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn non_finite_term_is_named() {
        let b = LossBreakdown {
            bodyfat: f64::NAN,
            ..LossBreakdown::default()
        };
        let e = check_finite(&b, "here").unwrap_err().to_string();
        assert!(e.contains("bodyfat"), "{e}");
        assert!(check_finite(&LossBreakdown::default(), "ok").is_ok());
    }

    #[test]
    fn log_round_trip() {
        let rec = |e, v| EpochRecord {
            epoch: e,
            lr: 1e-4,
            train: LossBreakdown {
                total: 3.0,
                ..LossBreakdown::default()
            },
            val: LossBreakdown {
                total: v,
                ..LossBreakdown::default()
            },
            wall_seconds: 0.0,
        };
        let log = TrainLog {
            epochs: vec![rec(1, 3.0), rec(2, 2.0)],
            best_epoch: 2,
        };
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().starts_with("{\"epoch\":1,\"lr\":"));
        assert_eq!(TrainLog::from_jsonl(&text).unwrap(), log);
        assert!(matches!(
            TrainLog::from_jsonl("{\"epoch\":\n{}"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn short_run_is_deterministic_and_tracks_best() {
        let dir = tempfile::tempdir().unwrap();
        let set = fixture(dir.path());
        let run = || {
            let mut m = model();
            let mut seen = 0;
            let out = train(&mut m, &set, &set, &quick(3), &mut |_| seen += 1).unwrap();
            assert_eq!(seen, 3);
            out
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
        assert_eq!(a.best.to_bytes(), b.best.to_bytes());
        let vals: Vec<f64> = a.log.epochs.iter().map(|e| e.val.total).collect();
        assert_eq!(Some(a.log.best_epoch), best_epoch(&vals));
        assert_eq!(a.log.epochs.len(), 3);
        assert_eq!(a.log.epochs[2].lr, 0.0);
    }

    #[test]
    fn zero_lambda_f_freezes_regression_weights() {
        let dir = tempfile::tempdir().unwrap();
        let set = fixture(dir.path());
        let mut m = model();
        let before = m.regression.as_ref().unwrap().weights.clone();
        let mut cfg = quick(2);
        cfg.loss_weights.lambda_f = 0.0;
        train(&mut m, &set, &set, &cfg, &mut |_| {}).unwrap();
        assert_eq!(m.regression.as_ref().unwrap().weights, before);
        assert_ne!(
            m.layers[0].conv.as_ref().unwrap().weight,
            model().layers[0].conv.as_ref().unwrap().weight
        );
    }

    #[test]
    fn rejects_mismatched_sets() {
        let dir = tempfile::tempdir().unwrap();
        let set = fixture(dir.path());
        let mut m = build_network(NetworkConfig::toy(), 1).unwrap();
        assert!(matches!(
            train(&mut m, &set, &set, &quick(2), &mut |_| {}),
            Err(Error::Dimension(_))
        ));
        let empty = set.subset(crate::data::Split::Test);
        let mut m = model();
        assert!(matches!(
            train(&mut m, &empty, &set, &quick(2), &mut |_| {}),
            Err(Error::Data(_))
        ));
    }
}
