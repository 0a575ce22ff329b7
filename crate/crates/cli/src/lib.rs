//! Command-line front end: data generation, shape report, training,
//! evaluation, inference and model comparison.
//!
//! Data goes to the output writer; progress and the resolved configuration
//! go to stderr.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use shapednet::architecture::{build_network, shape_report, ShapedNetModel};
use shapednet::data::{
    bmi_category, generate_synthetic_dataset, load_image, load_manifest, save_manifest, stratified_split, BmiCategory,
    Dataset, SampleRecord, Split,
};
use shapednet::evalstats::{evaluate_model, predict_subjects, render_tukey, tukey_hsd};
use shapednet::postprocess::postprocess_image;
use shapednet::training::{load_pretrained_backbone, train, Checkpoint};
use shapednet::Tensor;

use crate::config::{defaults_table, RunConfig, Section};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.conf";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_JSONL_FILE: &str = "report.jsonl";

static CONFIG_HELP: LazyLock<String> = LazyLock::new(|| {
    format!(
        "Configuration keys (set in a --config file as `key = value`, or with --set key=value):\n\n{}",
        defaults_table()
    )
});

#[derive(Debug, Parser)]
#[command(
    name = "shapednet",
    version,
    about = "Person detection and body-fat estimation from silhouettes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed (falls back to SHAPEDNET_SEED, then 0).
    #[arg(long)]
    pub seed: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic silhouette dataset, split it by BMI stratum and
    /// write the manifest.
    #[command(after_long_help = CONFIG_HELP.as_str())]
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; receives images/ and manifest.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<String>,
        /// Image side in pixels.
        #[arg(long)]
        size: Option<String>,
        /// Train,val,test fractions.
        #[arg(long)]
        split: Option<String>,
    },
    /// Print the per-layer shape table without running the network.
    #[command(after_long_help = CONFIG_HELP.as_str())]
    Shapes {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input side in pixels.
        #[arg(long)]
        input: Option<String>,
        /// Channel multiplier, decimal or a/b.
        #[arg(long)]
        mult: Option<String>,
        #[arg(long)]
        classes: Option<String>,
    },
    /// Train on the train split, select the checkpoint with the lowest
    /// validation loss, and write checkpoints, the log and the config.
    #[command(after_long_help = CONFIG_HELP.as_str())]
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<String>,
        #[arg(long)]
        lr: Option<String>,
        #[arg(long)]
        batch_size: Option<String>,
    },
    /// Score one or more checkpoints on every split and sex group.
    #[command(after_long_help = CONFIG_HELP.as_str())]
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint as PATH or NAME=PATH; repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        /// Directory for report.txt and report.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect the person and estimate body fat in images.
    #[command(after_long_help = CONFIG_HELP.as_str())]
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Tukey HSD over the absolute errors of two or more checkpoints.
    #[command(after_long_help = CONFIG_HELP.as_str())]
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint as PATH or NAME=PATH; at least two.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        /// Split to compare on: train, val or test.
        #[arg(long, default_value = "test")]
        split: Split,
    },
}

/// Defaults, environment seed, config file, `--set` overrides, then the
/// command's own flags.
fn resolve(args: &ConfigArgs, flags: &[(&str, &Option<String>)]) -> Result<RunConfig> {
    let mut c = RunConfig::from_env()?;
    if let Some(path) = &args.config {
        c.apply_file(path)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        c.set(k.trim(), v).with_context(|| format!("--set {kv}"))?;
    }
    if let Some(seed) = &args.seed {
        c.set("seed", seed).context("--seed")?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            c.set(key, v).with_context(|| format!("--{}", key.replace('_', "-")))?;
        }
    }
    Ok(c)
}

fn log_config(c: &RunConfig, sections: &[Section]) {
    eprintln!("resolved config:");
    for line in c.render(sections).lines() {
        eprintln!("  {line}");
    }
}

/// A dataset directory holding `manifest.csv`, or the manifest itself.
fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load_dataset(data: &Path, image_size: usize) -> Result<Dataset> {
    let manifest = manifest_path(data);
    let records = load_manifest(&manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    Ok(Dataset::load(&records, root, image_size)?)
}

fn load_model(path: &Path) -> Result<ShapedNetModel> {
    Checkpoint::load(path)?
        .to_model()
        .with_context(|| format!("restoring {}", path.display()))
}

/// `NAME=PATH`, or a bare path named after its file stem.
fn named_models(specs: &[String]) -> Result<Vec<(String, ShapedNetModel)>> {
    specs
        .iter()
        .map(|s| {
            let (name, path) = match s.split_once('=') {
                Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                None => {
                    let p = PathBuf::from(s);
                    let n = p.file_stem().map_or(s.clone(), |n| n.to_string_lossy().into_owned());
                    (n, p)
                }
            };
            Ok((name, load_model(&path)?))
        })
        .collect()
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData {
            cfg,
            out: dir,
            count,
            size,
            split,
        } => {
            let c = resolve(&cfg, &[("count", &count), ("image_size", &size), ("split", &split)])?;
            log_config(&c, &[Section::General, Section::Data]);
            gen_data(&c, &dir, out)
        }
        Command::Shapes {
            cfg,
            input,
            mult,
            classes,
        } => {
            let c = resolve(
                &cfg,
                &[
                    ("input_size", &input),
                    ("channel_mult", &mult),
                    ("num_classes", &classes),
                ],
            )?;
            log_config(&c, &[Section::Network]);
            writeln!(out, "{}", shape_report(&c.network)?)?;
            Ok(())
        }
        Command::Train {
            cfg,
            data,
            out: dir,
            epochs,
            lr,
            batch_size,
        } => {
            let c = resolve(
                &cfg,
                &[("epochs", &epochs), ("lr_init", &lr), ("batch_size", &batch_size)],
            )?;
            log_config(&c, &[Section::General, Section::Network, Section::Train]);
            train_cmd(&c, &data, &dir, out)
        }
        Command::Eval {
            cfg,
            models,
            data,
            out: dir,
        } => {
            let c = resolve(&cfg, &[])?;
            log_config(&c, &[Section::Eval]);
            eval_cmd(&c, &models, &data, dir.as_deref(), out)
        }
        Command::Infer { cfg, model, images } => {
            let c = resolve(&cfg, &[])?;
            log_config(&c, &[Section::Eval]);
            infer_cmd(&c, &model, &images, out)
        }
        Command::Compare {
            cfg,
            models,
            data,
            split,
        } => {
            let c = resolve(&cfg, &[])?;
            log_config(&c, &[Section::Eval]);
            compare_cmd(&c, &models, &data, split, out)
        }
    }
}

fn gen_data(c: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let mut records = generate_synthetic_dataset(&c.synthetic_spec(), dir)?;
    stratified_split(&mut records, c.split, c.seed)?;
    let manifest = dir.join(MANIFEST_FILE);
    save_manifest(&manifest, &records)?;
    write!(out, "{}", stratum_table(&records))?;
    eprintln!("wrote {} images and {}", records.len(), manifest.display());
    Ok(())
}

/// Subjects per BMI stratum and split.
pub fn stratum_table(records: &[SampleRecord]) -> String {
    let splits = [Split::Train, Split::Val, Split::Test];
    let mut s = format!(
        "{:<16} {:>6} {:>6} {:>6} {:>6}\n",
        "bmi stratum", "total", "train", "val", "test"
    );
    let mut totals = [0usize; 4];
    for cat in BmiCategory::ALL {
        let members: Vec<&SampleRecord> = records.iter().filter(|r| bmi_category(r.bmi) == cat).collect();
        let per: Vec<usize> = splits
            .iter()
            .map(|&sp| members.iter().filter(|r| r.split == sp).count())
            .collect();
        s += &format!(
            "{:<16} {:>6} {:>6} {:>6} {:>6}\n",
            cat.label(),
            members.len(),
            per[0],
            per[1],
            per[2]
        );
        totals[0] += members.len();
        for k in 0..3 {
            totals[k + 1] += per[k];
        }
    }
    s += &format!(
        "{:<16} {:>6} {:>6} {:>6} {:>6}\n",
        "all", totals[0], totals[1], totals[2], totals[3]
    );
    s
}

fn train_cmd(c: &RunConfig, data: &Path, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let all = load_dataset(data, c.network.input_size)?;
    let (train_set, val_set) = (all.subset(Split::Train), all.subset(Split::Val));
    if train_set.is_empty() || val_set.is_empty() {
        bail!(
            "{} has {} train and {} val records; both splits are required",
            manifest_path(data).display(),
            train_set.len(),
            val_set.len()
        );
    }
    let mut model = build_network(c.network.clone(), c.seed)?;
    if let Some(p) = &c.pretrained {
        load_pretrained_backbone(&mut model, p)?;
    }
    let tc = c.train_config();
    let outcome = train(&mut model, &train_set, &val_set, &tc, &mut |r| {
        eprintln!(
            "epoch {:>4}  lr {:.3e}  train {:.4} (bf {:.4})  val {:.4} (bf {:.4})  {:.1}s",
            r.epoch, r.lr, r.train.total, r.train.bodyfat, r.val.total, r.val.bodyfat, r.wall_seconds
        );
    })?;
    create_dir(dir)?;
    outcome.best.save(&dir.join(MODEL_FILE))?;
    Checkpoint::from_model(&model).save(&dir.join(FINAL_FILE))?;
    outcome.log.save(&dir.join(LOG_FILE))?;
    write_file(
        &dir.join(CONFIG_FILE),
        &c.render(&[Section::General, Section::Network, Section::Train]),
    )?;
    let best = &outcome.log.epochs[outcome.log.best_epoch - 1];
    writeln!(out, "epochs: {}", outcome.log.epochs.len())?;
    writeln!(out, "best epoch: {}", outcome.log.best_epoch)?;
    writeln!(out, "best val total: {}", best.val.total)?;
    writeln!(out, "best val bodyfat: {}", best.val.bodyfat)?;
    writeln!(out, "checkpoint: {}", dir.join(MODEL_FILE).display())?;
    Ok(())
}

fn eval_cmd(c: &RunConfig, specs: &[String], data: &Path, dir: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let models = named_models(specs)?;
    let size = models[0].1.config.input_size;
    if let Some((name, _)) = models.iter().find(|(_, m)| m.config.input_size != size) {
        bail!("model {name} has a different input size from {}", models[0].0);
    }
    let set = load_dataset(data, size)?;
    let refs: Vec<(String, &ShapedNetModel)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let report = evaluate_model(&refs, &set, c.alpha)?;
    let text = report.render();
    write!(out, "{text}")?;
    if let Some(dir) = dir {
        create_dir(dir)?;
        write_file(&dir.join(REPORT_FILE), &text)?;
        write_file(&dir.join(REPORT_JSONL_FILE), &report.to_jsonl())?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct InferLine {
    image: String,
    bfp: Option<f64>,
    #[serde(rename = "box")]
    bbox: Option<[f64; 4]>,
    confidence: Option<f64>,
    class: Option<usize>,
    detections: usize,
    low_confidence: bool,
}

fn infer_cmd(c: &RunConfig, model: &Path, images: &[PathBuf], out: &mut dyn Write) -> Result<()> {
    let model = load_model(model)?;
    let s = model.config.input_size;
    for path in images {
        let gray = load_image(path, s)?;
        let mut data = Vec::with_capacity(3 * s * s);
        for _ in 0..3 {
            data.extend_from_slice(&gray);
        }
        let raw = model.forward(&Tensor::new(vec![1, 3, s, s], data)?)?;
        let r = postprocess_image(&raw, 0, &model.config, c.conf_threshold, c.nms_threshold)?;
        let top = r.detections.first();
        let line = InferLine {
            image: path.display().to_string(),
            bfp: r.bfp,
            bbox: top.map(|d| [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h]),
            confidence: top.map(|d| d.confidence),
            class: top.map(|d| d.class_id),
            detections: r.detections.len(),
            low_confidence: r.low_confidence,
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

fn compare_cmd(c: &RunConfig, specs: &[String], data: &Path, split: Split, out: &mut dyn Write) -> Result<()> {
    if specs.len() < 2 {
        bail!("compare needs at least two models, got {}", specs.len());
    }
    let models = named_models(specs)?;
    let size = models[0].1.config.input_size;
    let set = load_dataset(data, size)?.subset(split);
    if set.is_empty() {
        bail!("no {split} records in {}", manifest_path(data).display());
    }
    let mut groups = Vec::new();
    for (name, model) in &models {
        if model.config.input_size != size {
            bail!("model {name} has a different input size from {}", models[0].0);
        }
        let errors = predict_subjects(model, &set)?
            .iter()
            .map(|s| s.pair.abs_error())
            .collect::<Vec<f64>>();
        groups.push((name.clone(), errors));
    }
    writeln!(out, "{:<16} {:>4} {:>10}", "model", "n", "mean |e|")?;
    for (name, e) in &groups {
        writeln!(
            out,
            "{:<16} {:>4} {:>10.4}",
            name,
            e.len(),
            e.iter().sum::<f64>() / e.len() as f64
        )?;
    }
    writeln!(out)?;
    write!(out, "{}", render_tukey(&tukey_hsd(&groups, c.alpha)?))?;
    Ok(())
}
