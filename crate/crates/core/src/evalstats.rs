//! Error metrics, t confidence intervals, Tukey HSD and evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::architecture::ShapedNetModel;
use crate::data::{Dataset, Sex, Split};
use crate::error::{Error, Result};
use crate::postprocess::{best_detection, iou};

/// One subject's ground truth and prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedError {
    pub truth: f64,
    pub predicted: f64,
    pub sex: Sex,
}

impl PairedError {
    pub fn abs_error(&self) -> f64 {
        (self.predicted - self.truth).abs()
    }

    pub fn pct_error(&self) -> f64 {
        100.0 * self.abs_error() / self.truth
    }

    /// Negative means underestimation.
    pub fn signed_diff(&self) -> f64 {
        self.predicted - self.truth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); absent for a single value.
    pub sd: Option<f64>,
}

pub fn mean_sd(values: &[f64]) -> Result<MeanSd> {
    if values.is_empty() {
        return Err(Error::Data("no values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Ok(MeanSd { mean, sd })
}

fn check_pairs(pairs: &[PairedError]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Data("no subjects".into()));
    }
    Ok(())
}

pub fn mape(pairs: &[PairedError]) -> Result<MeanSd> {
    check_pairs(pairs)?;
    if let Some(p) = pairs.iter().find(|p| !(p.truth > 0.0)) {
        return Err(Error::Data(format!("true bfp must be > 0, got {}", p.truth)));
    }
    mean_sd(&pairs.iter().map(PairedError::pct_error).collect::<Vec<_>>())
}

pub fn mae(pairs: &[PairedError]) -> Result<MeanSd> {
    check_pairs(pairs)?;
    mean_sd(&pairs.iter().map(PairedError::abs_error).collect::<Vec<_>>())
}

pub fn msd(pairs: &[PairedError]) -> Result<MeanSd> {
    check_pairs(pairs)?;
    mean_sd(&pairs.iter().map(PairedError::signed_diff).collect::<Vec<_>>())
}

/// Student t CDF.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Quantile of the Student t distribution for `p` in (0.5, 1), found by
/// bisection on [`t_cdf`] until the bracket is narrower than 1e-10.
pub fn t_quantile(p: f64, df: f64) -> Result<f64> {
    if !(p > 0.5 && p < 1.0) || !(df > 0.0) {
        return Err(Error::Parameter(format!(
            "t quantile needs 0.5 < p < 1 and df > 0, got p {p}, df {df}"
        )));
    }
    let mut hi = 1.0;
    while t_cdf(hi, df) < p {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Evaluation(format!("t quantile for p {p}, df {df} out of range")));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// `mean ± t(1 − α/2, n − 1) · s / √n`.
pub fn t_confidence_interval(samples: &[f64], alpha: f64) -> Result<Interval> {
    if samples.len() < 2 {
        return Err(Error::Data(format!(
            "confidence interval needs n >= 2, got {}",
            samples.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let ms = mean_sd(samples)?;
    let sd = ms.sd.expect("n >= 2");
    let n = samples.len() as f64;
    let half = t_quantile(1.0 - alpha / 2.0, n - 1.0)? * sd / n.sqrt();
    Ok(Interval {
        lo: ms.mean - half,
        hi: ms.mean + half,
    })
}

/// `hi − lo`, rounded to 10 decimals so decimal endpoints give decimal
/// widths (5.81 − 4.01 is 1.7999999999999998 in binary).
pub fn spread(ci: Interval) -> Result<f64> {
    if !(ci.hi >= ci.lo) {
        return Err(Error::Data(format!("inverted interval [{}, {}]", ci.lo, ci.hi)));
    }
    Ok(((ci.hi - ci.lo) * 1e10).round() / 1e10)
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1],
/// from Newton iteration on the Legendre polynomial.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            loop {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let kf = k as f64;
                    (p0, p1) = (p1, ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf);
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    let (mut p0, mut p1) = (1.0, x);
                    for k in 2..=n {
                        let kf = k as f64;
                        (p0, p1) = (p1, ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf);
                    }
                    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    return (x, 2.0 / ((1.0 - x * x) * dp * dp));
                }
            }
        })
        .collect()
}

/// Composite Gauss–Legendre quadrature over `pieces` equal subintervals.
fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, pieces: usize, rule: &[(f64, f64)]) -> f64 {
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let mid = a + (i as f64 + 0.5) * h;
            rule.iter().map(|&(x, w)| w * f(mid + 0.5 * h * x)).sum::<f64>() * 0.5 * h
        })
        .sum()
}

fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn big_phi(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Range of `k` standard normals: `P(R ≤ w)`.
fn range_cdf(w: f64, k: usize, rule: &[(f64, f64)]) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let kf = k as f64;
    let f = |z: f64| phi(z) * (big_phi(z) - big_phi(z - w)).max(0.0).powi(k as i32 - 1);
    (kf * integrate(&f, -8.5, 8.5, 34, rule)).clamp(0.0, 1.0)
}

/// CDF of the studentized range for `k` groups and `df` error degrees of
/// freedom, by integrating the normal-range CDF against the density of
/// `s = sqrt(χ²_df / df)`. Both integrals use composite 12-point
/// Gauss–Legendre rules; the result is accurate to well below 1e-6.
pub fn studentized_range_cdf(q: f64, k: usize, df: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let h = df / 2.0;
    let log_norm = h * df.ln() - ln_gamma(h) - (h - 1.0) * 2f64.ln();
    let density = |s: f64| {
        if s <= 0.0 {
            0.0
        } else {
            (log_norm + (df - 1.0) * s.ln() - 0.5 * df * s * s).exp()
        }
    };
    let width = 9.0 / df.sqrt();
    let (lo, hi) = ((1.0 - width).max(0.0), 1.0 + width);
    let rule = gauss_legendre(12);
    let f = |s: f64| density(s) * range_cdf(q * s, k, &rule);
    integrate(&f, lo, hi, 48, &rule).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyPair {
    pub group_a: String,
    pub group_b: String,
    /// `mean(A) − mean(B)`.
    pub md: f64,
    pub q: f64,
    pub p: f64,
    pub reject: bool,
}

/// Tukey–Kramer pairwise comparisons with pooled within-group variance.
pub fn tukey_hsd(groups: &[(String, Vec<f64>)], alpha: f64) -> Result<Vec<TukeyPair>> {
    if groups.len() < 2 {
        return Err(Error::Data(format!(
            "Tukey HSD needs at least 2 groups, got {}",
            groups.len()
        )));
    }
    if let Some((name, g)) = groups.iter().find(|(_, g)| g.len() < 2) {
        return Err(Error::Data(format!("group {name} has {} values, need >= 2", g.len())));
    }
    let k = groups.len();
    let total: usize = groups.iter().map(|(_, g)| g.len()).sum();
    let df = (total - k) as f64;
    let means: Vec<f64> = groups
        .iter()
        .map(|(_, g)| g.iter().sum::<f64>() / g.len() as f64)
        .collect();
    let sse: f64 = groups
        .iter()
        .zip(&means)
        .map(|((_, g), m)| g.iter().map(|x| (x - m).powi(2)).sum::<f64>())
        .sum();
    let mse = sse / df;
    let mut out = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let md = means[a] - means[b];
            let se = (mse / 2.0 * (1.0 / groups[a].1.len() as f64 + 1.0 / groups[b].1.len() as f64)).sqrt();
            let (q, p) = if md == 0.0 {
                (0.0, 1.0)
            } else if se == 0.0 {
                (f64::INFINITY, 0.0)
            } else {
                let q = md.abs() / se;
                (q, (1.0 - studentized_range_cdf(q, k, df)).clamp(0.0, 1.0))
            };
            out.push(TukeyPair {
                group_a: groups[a].0.clone(),
                group_b: groups[b].0.clone(),
                md,
                q,
                p,
                reject: p < alpha,
            });
        }
    }
    Ok(out)
}

/// Per-subject prediction on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub index: usize,
    pub image_path: String,
    pub split: Split,
    pub pair: PairedError,
    /// IoU of the highest-confidence detection with the ground-truth box.
    pub iou: f64,
}

/// Inference over every record of `set`, in record order.
pub fn predict_subjects(model: &ShapedNetModel, set: &Dataset) -> Result<Vec<SubjectResult>> {
    let mut out = Vec::with_capacity(set.len());
    let order: Vec<usize> = (0..set.len()).collect();
    for chunk in order.chunks(16) {
        let (images, targets) = set.batch(chunk, &[]);
        let raw = model.forward(&images)?;
        let bf = raw
            .bf
            .as_ref()
            .ok_or_else(|| Error::Evaluation("model has no regression branch".into()))?;
        for (k, &i) in chunk.iter().enumerate() {
            let rec = &set.records[i];
            let det = best_detection(&raw, k, &model.config)?;
            let o = &targets[k].objects[0];
            let truth = crate::postprocess::BBox {
                x: o.x,
                y: o.y,
                w: o.w,
                h: o.h,
            };
            out.push(SubjectResult {
                index: i,
                image_path: rec.image_path.clone(),
                split: rec.split,
                pair: PairedError {
                    truth: rec.bfp,
                    predicted: bf.data()[k],
                    sex: rec.sex,
                },
                iou: iou(&det.bbox, &truth),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: Option<f64>,
    /// 95% t interval; absent when the group has fewer than two members.
    pub ci: Option<Interval>,
    pub spread: Option<f64>,
}

fn summarize(values: &[f64], alpha: f64) -> Result<MetricSummary> {
    let ms = mean_sd(values)?;
    let ci = if values.len() >= 2 {
        Some(t_confidence_interval(values, alpha)?)
    } else {
        None
    };
    Ok(MetricSummary {
        mean: ms.mean,
        sd: ms.sd,
        ci,
        spread: ci.map(spread).transpose()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Male,
    Female,
    GenderNeutral,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Male, Group::Female, Group::GenderNeutral];

    pub fn label(self) -> &'static str {
        match self {
            Group::Male => "male",
            Group::Female => "female",
            Group::GenderNeutral => "gender-neutral",
        }
    }

    pub fn contains(self, sex: Sex) -> bool {
        match self {
            Group::Male => sex == Sex::Male,
            Group::Female => sex == Sex::Female,
            Group::GenderNeutral => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub model: String,
    pub split: Split,
    pub group: Group,
    pub n: usize,
    pub mape: Option<MetricSummary>,
    pub mae: Option<MetricSummary>,
    pub msd: Option<MetricSummary>,
    pub mean_iou: Option<f64>,
    /// Fraction of subjects whose best detection has IoU ≥ 0.5.
    pub iou_hit_rate: Option<f64>,
    /// MAPE mean below 10%.
    pub success: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alpha: f64,
    pub rows: Vec<GroupReport>,
    /// Pairwise comparison of the models' test-split absolute errors.
    pub tukey: Vec<TukeyPair>,
}

/// IoU at which a detection counts as a hit.
pub const IOU_HIT: f64 = 0.5;

pub const SPLIT_ORDER: [Split; 3] = [Split::Test, Split::Val, Split::Train];

fn group_row(model: &str, split: Split, group: Group, subjects: &[&SubjectResult], alpha: f64) -> Result<GroupReport> {
    let pairs: Vec<PairedError> = subjects.iter().map(|s| s.pair).collect();
    let mut row = GroupReport {
        model: model.to_string(),
        split,
        group,
        n: pairs.len(),
        mape: None,
        mae: None,
        msd: None,
        mean_iou: None,
        iou_hit_rate: None,
        success: None,
    };
    if pairs.is_empty() {
        return Ok(row);
    }
    mape(&pairs)?;
    let pct: Vec<f64> = pairs.iter().map(PairedError::pct_error).collect();
    let abs: Vec<f64> = pairs.iter().map(PairedError::abs_error).collect();
    let signed: Vec<f64> = pairs.iter().map(PairedError::signed_diff).collect();
    row.mape = Some(summarize(&pct, alpha)?);
    row.mae = Some(summarize(&abs, alpha)?);
    row.msd = Some(summarize(&signed, alpha)?);
    let n = subjects.len() as f64;
    row.mean_iou = Some(subjects.iter().map(|s| s.iou).sum::<f64>() / n);
    row.iou_hit_rate = Some(subjects.iter().filter(|s| s.iou >= IOU_HIT).count() as f64 / n);
    row.success = row.mape.map(|m| m.mean < 10.0);
    Ok(row)
}

/// Scores each model on every split (test, validation, train) and group
/// (male, female, gender-neutral) of `set`. With two or more models, their
/// test-split absolute errors go through Tukey HSD.
pub fn evaluate_model(models: &[(String, &ShapedNetModel)], set: &Dataset, alpha: f64) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(Error::Evaluation("no model to evaluate".into()));
    }
    if set.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut rows = Vec::new();
    let mut test_abs = Vec::new();
    for (name, model) in models {
        let subjects = predict_subjects(model, set)?;
        for split in SPLIT_ORDER {
            for group in Group::ALL {
                let members: Vec<&SubjectResult> = subjects
                    .iter()
                    .filter(|s| s.split == split && group.contains(s.pair.sex))
                    .collect();
                rows.push(group_row(name, split, group, &members, alpha)?);
            }
        }
        let test: Vec<f64> = subjects
            .iter()
            .filter(|s| s.split == Split::Test)
            .map(|s| s.pair.abs_error())
            .collect();
        test_abs.push((name.clone(), test));
    }
    let tukey = if models.len() >= 2 {
        tukey_hsd(&test_abs, alpha)?
    } else {
        Vec::new()
    };
    Ok(EvalReport { alpha, rows, tukey })
}

/// `.xxx` with a floor of `.001`.
pub fn format_p(p: f64) -> String {
    let s = format!("{:.3}", p.max(0.001));
    s.strip_prefix('0').map(str::to_string).unwrap_or(s)
}

fn cell(m: &Option<MetricSummary>) -> (String, String, String) {
    match m {
        None => ("n/a".into(), "n/a".into(), "n/a".into()),
        Some(m) => {
            let ms = match m.sd {
                Some(sd) => format!("{:.2} ± {:.2}", m.mean, sd),
                None => format!("{:.2}", m.mean),
            };
            let ci =
                m.ci.map_or("unavailable".into(), |c| format!("[{:.2}, {:.2}]", c.lo, c.hi));
            let sp = m.spread.map_or("n/a".into(), |s| format!("{s:.2}"));
            (ms, ci, sp)
        }
    }
}

impl EvalReport {
    /// Human-readable tables: metrics per split and group, then Tukey pairs.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let conf = ((1.0 - self.alpha) * 100.0).round();
        let _ = writeln!(
            s,
            "{:<10} {:<6} {:<15} {:>4}  {:<16} {:<18} {:>6}  {:<16} {:<18} {:>6}  {:<16} {:<18} {:>6}  {:>5}  {:>6}  <10%",
            "model", "split", "group", "n", "MAPE", format!("MAPE {conf}% CI"), "υ", "MAE", "MAE CI", "υ", "MSD", "MSD CI", "υ", "IoU", "IoU≥.5"
        );
        for r in &self.rows {
            let (a, b, c) = cell(&r.mape);
            let (d, e, f) = cell(&r.mae);
            let (g, h, i) = cell(&r.msd);
            let iou = r.mean_iou.map_or("n/a".into(), |v| format!("{v:.3}"));
            let hits = r.iou_hit_rate.map_or("n/a".into(), |v| format!("{v:.3}"));
            let ok = r.success.map_or("n/a", |v| if v { "yes" } else { "no" });
            let _ = writeln!(
                s,
                "{:<10} {:<6} {:<15} {:>4}  {:<16} {:<18} {:>6}  {:<16} {:<18} {:>6}  {:<16} {:<18} {:>6}  {:>5}  {:>6}  {}",
                r.model,
                r.split.to_string(),
                r.group.label(),
                r.n,
                a,
                b,
                c,
                d,
                e,
                f,
                g,
                h,
                i,
                iou,
                hits,
                ok
            );
        }
        if !self.tukey.is_empty() {
            s.push('\n');
            s.push_str(&render_tukey(&self.tukey));
        }
        s
    }

    /// One JSON object per row, then one per Tukey pair, fixed field order.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r).expect("row serializes"));
            s.push('\n');
        }
        for t in &self.tukey {
            s.push_str(&serde_json::to_string(t).expect("pair serializes"));
            s.push('\n');
        }
        s
    }
}

pub fn render_tukey(pairs: &[TukeyPair]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:<16} {:>10} {:>8} {:>7}  reject",
        "group A", "group B", "MD", "q", "p"
    );
    for t in pairs {
        let _ = writeln!(
            s,
            "{:<16} {:<16} {:>10.4} {:>8.3} {:>7}  {}",
            t.group_a,
            t.group_b,
            t.md,
            t.q,
            format_p(t.p),
            if t.reject { "yes" } else { "no" }
        );
    }
    s
}
