//! Flat `key = value` run configuration.
//!
//! Values resolve in this order, later winning: built-in defaults, the
//! `SHAPEDNET_SEED` environment variable (seed only), the config file, then
//! command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use shapednet::architecture::NetworkConfig;
use shapednet::data::SyntheticSpec;
use shapednet::loss::BfLossMode;
use shapednet::postprocess::{DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_THRESHOLD};
use shapednet::training::TrainConfig;

pub const SEED_ENV: &str = "SHAPEDNET_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    General,
    Data,
    Network,
    Train,
    Eval,
}

impl Section {
    fn label(self) -> &'static str {
        match self {
            Section::General => "general",
            Section::Data => "data",
            Section::Network => "network",
            Section::Train => "train",
            Section::Eval => "eval",
        }
    }
}

/// Every accepted key with its section and meaning.
pub const KEYS: &[(&str, Section, &str)] = &[
    (
        "seed",
        Section::General,
        "master seed for data, initialization and batching",
    ),
    ("count", Section::Data, "number of synthetic subjects"),
    (
        "image_size",
        Section::Data,
        "side of the generated square images in pixels",
    ),
    ("fatness_min", Section::Data, "lower end of the uniform fatness range"),
    ("fatness_max", Section::Data, "upper end of the uniform fatness range"),
    ("sex_ratio", Section::Data, "fraction of female subjects"),
    ("split", Section::Data, "train,val,test fractions"),
    (
        "input_size",
        Section::Network,
        "network input side in pixels, multiple of 32",
    ),
    (
        "channel_mult",
        Section::Network,
        "scale on backbone widths, decimal or a/b",
    ),
    ("num_classes", Section::Network, "detection classes"),
    (
        "anchors",
        Section::Network,
        "nine w,h pairs in image units, space separated",
    ),
    ("regression_branch", Section::Network, "build the body-fat branch"),
    ("leaky_slope", Section::Network, "negative slope of the leaky ReLU"),
    ("dropout", Section::Network, "dropout rate on the regression input"),
    ("bn_eps", Section::Network, "batch-norm epsilon"),
    (
        "bn_momentum",
        Section::Network,
        "weight of new batch statistics in running averages",
    ),
    ("epochs", Section::Train, "training epochs"),
    ("warmup_epochs", Section::Train, "linear warmup epochs"),
    ("lr_init", Section::Train, "peak learning rate"),
    ("lr_min", Section::Train, "learning-rate floor of the cosine decay"),
    ("batch_size", Section::Train, "images per step"),
    ("adam_beta1", Section::Train, "Adam first-moment decay"),
    ("adam_beta2", Section::Train, "Adam second-moment decay"),
    ("adam_eps", Section::Train, "Adam epsilon"),
    ("bf_loss", Section::Train, "body-fat loss: signed, absolute or squared"),
    ("lambda_coord", Section::Train, "box coordinate loss weight"),
    ("lambda_noobj", Section::Train, "no-object confidence loss weight"),
    ("lambda_f", Section::Train, "body-fat loss weight"),
    ("grad_clip", Section::Train, "global gradient-norm limit, or none"),
    ("hflip", Section::Train, "random horizontal flips"),
    (
        "init_bf_bias",
        Section::Train,
        "start the regression bias at the mean training BFP",
    ),
    (
        "pretrained",
        Section::Train,
        "checkpoint to take backbone weights from, or none",
    ),
    ("alpha", Section::Eval, "significance level for intervals and Tukey HSD"),
    ("conf_threshold", Section::Eval, "minimum detection confidence"),
    (
        "nms_threshold",
        Section::Eval,
        "IoU above which detections are suppressed",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    pub split: (f64, f64, f64),
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub pretrained: Option<PathBuf>,
    pub alpha: f64,
    pub conf_threshold: f64,
    pub nms_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SyntheticSpec::default(),
            split: (0.8, 0.1, 0.1),
            network: NetworkConfig::toy(),
            train: TrainConfig::default(),
            pretrained: None,
            alpha: 0.05,
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| anyhow!("invalid value {v:?} for {key}: {e}"))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("invalid value {v:?} for {key}: expected true or false"),
    }
}

/// A decimal or an `a/b` ratio.
fn ratio(key: &str, v: &str) -> Result<f64> {
    match v.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (num(key, a.trim())?, num(key, b.trim())?);
            if b == 0.0 {
                bail!("invalid value {v:?} for {key}: zero denominator");
            }
            Ok(a / b)
        }
        None => num(key, v),
    }
}

fn list(key: &str, v: &str, sep: char) -> Result<Vec<f64>> {
    v.split(sep).map(|p| num::<f64>(key, p.trim())).collect()
}

impl RunConfig {
    /// Defaults with the seed taken from `SHAPEDNET_SEED` when it is set.
    pub fn from_env() -> Result<Self> {
        let mut c = Self::default();
        if let Ok(v) = std::env::var(SEED_ENV) {
            c.seed = num(SEED_ENV, v.trim())?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "count" => self.data.count = num(key, v)?,
            "image_size" => self.data.image_size = num(key, v)?,
            "fatness_min" => self.data.fatness_range.0 = num(key, v)?,
            "fatness_max" => self.data.fatness_range.1 = num(key, v)?,
            "sex_ratio" => self.data.sex_ratio = ratio(key, v)?,
            "split" => match list(key, v, ',')?[..] {
                [a, b, c] => self.split = (a, b, c),
                _ => bail!("invalid value {v:?} for split: expected three fractions"),
            },
            "input_size" => self.network.input_size = num(key, v)?,
            "channel_mult" => self.network.channel_mult = ratio(key, v)?,
            "num_classes" => self.network.num_classes = num(key, v)?,
            "anchors" => {
                let pairs: Vec<Vec<f64>> = v.split_whitespace().map(|p| list(key, p, ',')).collect::<Result<_>>()?;
                if pairs.len() != 9 || pairs.iter().any(|p| p.len() != 2) {
                    bail!("invalid value for anchors: expected nine w,h pairs");
                }
                for (slot, p) in self.network.anchors.iter_mut().zip(&pairs) {
                    *slot = (p[0], p[1]);
                }
            }
            "regression_branch" => self.network.regression_branch = boolean(key, v)?,
            "leaky_slope" => self.network.leaky_slope = num(key, v)?,
            "dropout" => self.network.dropout = num(key, v)?,
            "bn_eps" => self.network.bn_eps = num(key, v)?,
            "bn_momentum" => self.network.bn_momentum = num(key, v)?,
            "epochs" => self.train.epochs = num(key, v)?,
            "warmup_epochs" => self.train.warmup_epochs = num(key, v)?,
            "lr_init" => self.train.lr_init = num(key, v)?,
            "lr_min" => self.train.lr_min = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "adam_beta1" => self.train.adam.beta1 = num(key, v)?,
            "adam_beta2" => self.train.adam.beta2 = num(key, v)?,
            "adam_eps" => self.train.adam.eps = num(key, v)?,
            "bf_loss" => self.train.bf_loss_mode = v.parse::<BfLossMode>()?,
            "lambda_coord" => self.train.loss_weights.lambda_coord = num(key, v)?,
            "lambda_noobj" => self.train.loss_weights.lambda_noobj = num(key, v)?,
            "lambda_f" => self.train.loss_weights.lambda_f = num(key, v)?,
            "grad_clip" => self.train.grad_clip = if v == "none" { None } else { Some(num(key, v)?) },
            "hflip" => self.train.hflip = boolean(key, v)?,
            "init_bf_bias" => self.train.init_bf_bias = boolean(key, v)?,
            "pretrained" => self.pretrained = if v == "none" { None } else { Some(PathBuf::from(v)) },
            "alpha" => self.alpha = num(key, v)?,
            "conf_threshold" => self.conf_threshold = num(key, v)?,
            "nms_threshold" => self.nms_threshold = num(key, v)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "seed" => self.seed.to_string(),
            "count" => self.data.count.to_string(),
            "image_size" => self.data.image_size.to_string(),
            "fatness_min" => self.data.fatness_range.0.to_string(),
            "fatness_max" => self.data.fatness_range.1.to_string(),
            "sex_ratio" => self.data.sex_ratio.to_string(),
            "split" => format!("{},{},{}", self.split.0, self.split.1, self.split.2),
            "input_size" => self.network.input_size.to_string(),
            "channel_mult" => self.network.channel_mult.to_string(),
            "num_classes" => self.network.num_classes.to_string(),
            "anchors" => self
                .network
                .anchors
                .iter()
                .map(|(w, h)| format!("{w},{h}"))
                .collect::<Vec<_>>()
                .join(" "),
            "regression_branch" => self.network.regression_branch.to_string(),
            "leaky_slope" => self.network.leaky_slope.to_string(),
            "dropout" => self.network.dropout.to_string(),
            "bn_eps" => self.network.bn_eps.to_string(),
            "bn_momentum" => self.network.bn_momentum.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "warmup_epochs" => self.train.warmup_epochs.to_string(),
            "lr_init" => self.train.lr_init.to_string(),
            "lr_min" => self.train.lr_min.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "adam_beta1" => self.train.adam.beta1.to_string(),
            "adam_beta2" => self.train.adam.beta2.to_string(),
            "adam_eps" => self.train.adam.eps.to_string(),
            "bf_loss" => self.train.bf_loss_mode.to_string(),
            "lambda_coord" => self.train.loss_weights.lambda_coord.to_string(),
            "lambda_noobj" => self.train.loss_weights.lambda_noobj.to_string(),
            "lambda_f" => self.train.loss_weights.lambda_f.to_string(),
            "grad_clip" => self.train.grad_clip.map_or("none".into(), |c| c.to_string()),
            "hflip" => self.train.hflip.to_string(),
            "init_bf_bias" => self.train.init_bf_bias.to_string(),
            "pretrained" => self
                .pretrained
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
            "alpha" => self.alpha.to_string(),
            "conf_threshold" => self.conf_threshold.to_string(),
            "nms_threshold" => self.nms_threshold.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are
    /// skipped; a repeated key keeps its last value.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key = value, got {raw:?}", n + 1))?;
            self.set(k.trim(), v).with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `key = value` lines for the given sections, in table order.
    pub fn render(&self, sections: &[Section]) -> String {
        let mut s = String::new();
        for (key, section, _) in KEYS {
            if sections.contains(section) {
                let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
            }
        }
        s
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

/// Markdown-style table of every key with its default and meaning.
pub fn defaults_table() -> String {
    let d = RunConfig::default();
    let mut s = String::from("| key | section | default | meaning |\n|---|---|---|---|\n");
    for (key, section, doc) in KEYS {
        let _ = writeln!(
            s,
            "| `{key}` | {} | `{}` | {doc} |",
            section.label(),
            d.get(key).expect("listed key")
        );
    }
    s
}
