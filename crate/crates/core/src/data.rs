//! Synthetic silhouette dataset, manifests and BMI-stratified splitting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{DetectionTarget, ObjectBox};
pub use crate::postprocess::BBox;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

pub const BFP_MIN: f64 = 9.30;
pub const BFP_MAX: f64 = 57.60;

/// Linear map of fatness `s` in `[0, 1]` onto `[BFP_MIN, BFP_MAX]`.
pub fn synthetic_bfp(s: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Data(format!("fatness must be in [0, 1], got {s}")));
    }
    Ok(BFP_MIN * (1.0 - s) + BFP_MAX * s)
}

/// Inverse of [`synthetic_bfp`].
pub fn fatness_of(bfp: f64) -> f64 {
    (bfp - BFP_MIN) / (BFP_MAX - BFP_MIN)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" => Ok(Sex::Male),
            "F" => Ok(Sex::Female),
            other => Err(Error::Data(format!("sex must be M or F, got {other:?}"))),
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Male => "M",
            Sex::Female => "F",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: String,
    pub bbox: BBox,
    pub bfp: f64,
    pub sex: Sex,
    pub height: f64,
    pub weight: f64,
    pub bmi: f64,
    pub split: Split,
}

impl SampleRecord {
    /// Checks the record invariants, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        let b = &self.bbox;
        for (name, v) in [("x", b.x), ("y", b.y)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        for (name, v) in [("w", b.w), ("h", b.h)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Data(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        if !(BFP_MIN..=BFP_MAX).contains(&self.bfp) {
            return Err(Error::Data(format!(
                "bfp must be in [{BFP_MIN}, {BFP_MAX}], got {}",
                self.bfp
            )));
        }
        let bmi = compute_bmi(self.weight, self.height)?;
        if (bmi - self.bmi).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "bmi {} does not match weight/height² = {bmi}",
                self.bmi
            )));
        }
        Ok(())
    }

    pub fn target(&self) -> DetectionTarget {
        DetectionTarget {
            objects: vec![ObjectBox {
                x: self.bbox.x,
                y: self.bbox.y,
                w: self.bbox.w,
                h: self.bbox.h,
                class_id: 0,
            }],
            bfp: self.bfp,
        }
    }
}

pub fn compute_bmi(weight: f64, height: f64) -> Result<f64> {
    if !(weight > 0.0) {
        return Err(Error::Data(format!("weight must be > 0, got {weight}")));
    }
    if !(height > 0.0) {
        return Err(Error::Data(format!("height must be > 0, got {height}")));
    }
    Ok(weight / (height * height))
}

/// WHO BMI classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BmiCategory {
    Underweight,
    Normal,
    Overweight,
    ObeseI,
    ObeseII,
    ObeseIII,
}

impl BmiCategory {
    pub const ALL: [BmiCategory; 6] = [
        BmiCategory::Underweight,
        BmiCategory::Normal,
        BmiCategory::Overweight,
        BmiCategory::ObeseI,
        BmiCategory::ObeseII,
        BmiCategory::ObeseIII,
    ];

    /// 1-based stratum number.
    pub fn stratum(self) -> usize {
        self as usize + 1
    }

    pub fn label(self) -> &'static str {
        match self {
            BmiCategory::Underweight => "underweight",
            BmiCategory::Normal => "normal",
            BmiCategory::Overweight => "overweight",
            BmiCategory::ObeseI => "obese-I",
            BmiCategory::ObeseII => "obese-II",
            BmiCategory::ObeseIII => "obese-III",
        }
    }
}

/// Cut-points 18.5, 25, 30, 35, 40; each class includes its lower bound.
pub fn bmi_category(bmi: f64) -> BmiCategory {
    match bmi {
        b if b < 18.5 => BmiCategory::Underweight,
        b if b < 25.0 => BmiCategory::Normal,
        b if b < 30.0 => BmiCategory::Overweight,
        b if b < 35.0 => BmiCategory::ObeseI,
        b if b < 40.0 => BmiCategory::ObeseII,
        _ => BmiCategory::ObeseIII,
    }
}

/// Largest-remainder apportionment of `n` items by `weights` (which sum to 1).
/// Ties in the fractional part go to the earlier entry.
pub fn largest_remainder(n: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Assigns train/val/test labels within each BMI stratum.
///
/// Overall split sizes are the largest-remainder apportionment of the whole
/// set. Each stratum receives, per split, the floor or ceiling of its exact
/// share, chosen so the stratum and split totals both add up; within a
/// stratum, records are shuffled with a seeded generator before the labels
/// are dealt out in split order.
pub fn stratified_split(records: &mut [SampleRecord], ratios: (f64, f64, f64), seed: u64) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Data("cannot split an empty record set".into()));
    }
    let ratios = [ratios.0, ratios.1, ratios.2];
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); BmiCategory::ALL.len()];
    for (i, r) in records.iter().enumerate() {
        strata[bmi_category(r.bmi) as usize].push(i);
    }
    let totals = largest_remainder(records.len(), &ratios);
    let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
    let counts = controlled_rounding(&sizes, &ratios, &totals);
    let labels = [Split::Train, Split::Val, Split::Test];
    for (s, members) in strata.iter_mut().enumerate() {
        let mut rng = seeded(derive_seed(seed, s as u64));
        members.shuffle(&mut rng);
        let mut it = members.iter();
        for (j, &label) in labels.iter().enumerate() {
            for &i in it.by_ref().take(counts[s][j]) {
                records[i].split = label;
            }
        }
    }
    Ok(())
}

/// Rounds the table `sizes[s] * ratios[j]` to integers with row sums
/// `sizes[s]` and column sums `totals[j]`, each cell the floor or ceiling of
/// its exact value. Rounding up prefers larger fractional parts.
fn controlled_rounding(sizes: &[usize], ratios: &[f64], totals: &[usize]) -> Vec<Vec<usize>> {
    let (rows, cols) = (sizes.len(), ratios.len());
    let exact: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&n| ratios.iter().map(|r| r * n as f64).collect())
        .collect();
    let mut cells: Vec<Vec<usize>> = exact
        .iter()
        .map(|row| row.iter().map(|e| e.floor() as usize).collect())
        .collect();
    let mut row_need: Vec<usize> = (0..rows).map(|s| sizes[s] - cells[s].iter().sum::<usize>()).collect();
    let mut col_need: Vec<usize> = (0..cols)
        .map(|j| totals[j].saturating_sub((0..rows).map(|s| cells[s][j]).sum()))
        .collect();
    let frac = |s: usize, j: usize| exact[s][j] - exact[s][j].floor();
    let mut up = vec![vec![false; cols]; rows];

    let mut candidates: Vec<(usize, usize)> = (0..rows)
        .flat_map(|s| (0..cols).map(move |j| (s, j)))
        .filter(|&(s, j)| frac(s, j) > 0.0)
        .collect();
    candidates.sort_by(|a, b| frac(b.0, b.1).total_cmp(&frac(a.0, a.1)).then(a.cmp(b)));
    for &(s, j) in &candidates {
        if row_need[s] > 0 && col_need[j] > 0 {
            up[s][j] = true;
            row_need[s] -= 1;
            col_need[j] -= 1;
        }
    }
    // Greedy choices can block a row; reroute along alternating paths.
    for s in 0..rows {
        while row_need[s] > 0 {
            let Some(path) = augmenting_path(s, &up, &col_need, &|r, c| frac(r, c) > 0.0) else {
                break;
            };
            // The path starts at the column that absorbs the extra unit.
            col_need[path[0].1] -= 1;
            for (r, c, add) in path {
                up[r][c] = add;
            }
            row_need[s] -= 1;
        }
    }
    for s in 0..rows {
        for j in 0..cols {
            cells[s][j] += up[s][j] as usize;
        }
    }
    cells
}

/// Breadth-first search for an alternating path from row `start` to a column
/// with spare capacity: unused admissible cells forward, used cells back.
/// Returns the cell flips to apply.
fn augmenting_path(
    start: usize,
    up: &[Vec<bool>],
    col_need: &[usize],
    admissible: &dyn Fn(usize, usize) -> bool,
) -> Option<Vec<(usize, usize, bool)>> {
    let (rows, cols) = (up.len(), col_need.len());
    let mut col_from: Vec<Option<usize>> = vec![None; cols];
    let mut row_from: Vec<Option<usize>> = vec![None; rows];
    let mut seen_row = vec![false; rows];
    seen_row[start] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(r) = queue.pop_front() {
        for c in 0..cols {
            if col_from[c].is_some() || up[r][c] || !admissible(r, c) {
                continue;
            }
            col_from[c] = Some(r);
            if col_need[c] > 0 {
                let mut path = Vec::new();
                let mut c = c;
                loop {
                    let r = col_from[c].expect("visited column");
                    path.push((r, c, true));
                    match row_from[r] {
                        Some(prev_c) => {
                            path.push((r, prev_c, false));
                            c = prev_c;
                        }
                        None => return Some(path),
                    }
                }
            }
            for r2 in 0..rows {
                if up[r2][c] && !seen_row[r2] {
                    seen_row[r2] = true;
                    row_from[r2] = Some(c);
                    queue.push_back(r2);
                }
            }
        }
    }
    None
}

/// Parameters of the procedural generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub image_size: usize,
    /// Fatness is drawn uniformly from this interval.
    pub fatness_range: (f64, f64),
    /// Probability that a sample is female.
    pub sex_ratio: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 280,
            image_size: 64,
            fatness_range: (0.0, 1.0),
            sex_ratio: 695.0 / 1273.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::Data("count must be >= 1".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Data(format!(
                "image size must be >= 32, got {}",
                self.image_size
            )));
        }
        let (lo, hi) = self.fatness_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Data(format!(
                "fatness range must lie in [0, 1], got {:?}",
                self.fatness_range
            )));
        }
        if !(0.0..=1.0).contains(&self.sex_ratio) {
            return Err(Error::Data(format!(
                "sex ratio must be in [0, 1], got {}",
                self.sex_ratio
            )));
        }
        Ok(())
    }
}

/// Figure layout in pixels, derived from the sampled attributes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Silhouette {
    pub center_x: f64,
    pub top: f64,
    pub height: f64,
    pub fatness: f64,
    pub sex: Sex,
    pub shade: u8,
}

const BACKGROUND: u8 = 255;

impl Silhouette {
    fn head_radius(&self) -> f64 {
        0.075 * self.height
    }

    /// Half width of the torso ellipse; strictly increasing in fatness.
    pub fn torso_half_width(&self) -> f64 {
        let base = match self.sex {
            Sex::Male => 0.07,
            Sex::Female => 0.06,
        };
        (base + 0.3 * self.fatness) * self.height
    }

    fn shoulder_half_width(&self) -> f64 {
        let k = match self.sex {
            Sex::Male => 1.2,
            Sex::Female => 1.0,
        };
        k * self.torso_half_width().max(0.1 * self.height)
    }

    fn hip_half_width(&self) -> f64 {
        let k = match self.sex {
            Sex::Male => 0.9,
            Sex::Female => 1.15,
        };
        k * self.torso_half_width()
    }

    fn limb_half_width(&self) -> f64 {
        (0.018 + 0.03 * self.fatness) * self.height
    }

    /// Largest horizontal distance of any figure pixel from the center line.
    pub fn half_extent(&self) -> f64 {
        (self.shoulder_half_width() + self.limb_half_width()).max(self.hip_half_width())
    }

    /// Whether the point `(x, y)` in pixel coordinates is inside the figure.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let h = self.height;
        let cx = self.center_x;
        let r = self.head_radius();
        let head_cy = self.top + r;
        if (x - cx).powi(2) + (y - head_cy).powi(2) <= r * r {
            return true;
        }
        let neck = self.top + 2.0 * r;
        let torso_top = neck + 0.02 * h;
        let torso_bottom = self.top + 0.55 * h;
        let torso_cy = 0.5 * (torso_top + torso_bottom);
        let torso_ry = 0.5 * (torso_bottom - torso_top);
        let tw = self.torso_half_width();
        if ((x - cx) / tw).powi(2) + ((y - torso_cy) / torso_ry).powi(2) <= 1.0 {
            return true;
        }
        // neck
        if y >= neck - 0.5 && y <= torso_top + 0.05 * h && (x - cx).abs() <= 0.04 * h {
            return true;
        }
        let limb = self.limb_half_width();
        // shoulders and arms
        let sw = self.shoulder_half_width();
        let shoulder_y = torso_top + 0.03 * h;
        if y >= shoulder_y && y <= shoulder_y + 0.06 * h && (x - cx).abs() <= sw {
            return true;
        }
        let arm_bottom = self.top + 0.58 * h;
        if y >= shoulder_y && y <= arm_bottom && ((x - cx).abs() - sw).abs() <= limb {
            return true;
        }
        // hips
        let hw = self.hip_half_width();
        let hip_cy = torso_bottom - 0.02 * h;
        if ((x - cx) / hw).powi(2) + ((y - hip_cy) / (0.07 * h)).powi(2) <= 1.0 {
            return true;
        }
        // legs
        let leg_x = 0.55 * hw;
        let bottom = self.top + h;
        y >= hip_cy && y <= bottom && ((x - cx).abs() - leg_x).abs() <= limb * 1.3
    }

    /// Renders onto a white `size × size` canvas. Each pixel blends the
    /// shade and the background by its coverage on a 4×4 subsample grid, so
    /// a pixel is background exactly when no subsample hits the figure.
    pub fn render(&self, size: usize) -> GrayImage {
        const N: u32 = 4;
        GrayImage::from_fn(size as u32, size as u32, |px, py| {
            let mut hits = 0;
            for sy in 0..N {
                for sx in 0..N {
                    let x = px as f64 + (sx as f64 + 0.5) / N as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / N as f64;
                    hits += u32::from(self.contains(x, y));
                }
            }
            let span = (BACKGROUND - self.shade) as u32;
            let dark = (hits * span + (N * N) / 2) / (N * N);
            image::Luma([BACKGROUND - dark.max(u32::from(hits > 0)) as u8])
        })
    }
}

/// Tight bounds of non-background pixels as a normalized box.
pub fn pixel_bbox(img: &GrayImage) -> Option<BBox> {
    let (w, h) = img.dimensions();
    let mut bounds: Option<(u32, u32, u32, u32)> = None;
    for (x, y, p) in img.enumerate_pixels() {
        if p.0[0] != BACKGROUND {
            bounds = Some(match bounds {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
    }
    bounds.map(|(x0, y0, x1, y1)| {
        let (w, h) = (w as f64, h as f64);
        BBox {
            x: (x0 + x1 + 1) as f64 / 2.0 / w,
            y: (y0 + y1 + 1) as f64 / 2.0 / h,
            w: (x1 - x0 + 1) as f64 / w,
            h: (y1 - y0 + 1) as f64 / h,
        }
    })
}

/// Samples the attributes of record `index` and its silhouette.
fn sample_subject(spec: &SyntheticSpec, index: usize) -> Result<(Silhouette, f64, f64, f64)> {
    let mut rng = seeded(derive_seed(spec.seed, index as u64));
    let (lo, hi) = spec.fatness_range;
    let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let sex = if rng.random_bool(spec.sex_ratio) {
        Sex::Female
    } else {
        Sex::Male
    };
    let height = match sex {
        Sex::Male => rng.random_range(1.60..1.95),
        Sex::Female => rng.random_range(1.50..1.82),
    };
    let bmi = 16.0 + 28.0 * s + rng.random_range(-1.5..1.5);
    let weight = bmi * height * height;
    let size = spec.image_size as f64;
    let fig_h = rng.random_range(0.75..0.9) * size;
    let top = rng.random_range(0.02 * size..(0.98 * size - fig_h).max(0.02 * size + 1.0));
    let shade = rng.random_range(30..=90u8);
    let mut fig = Silhouette {
        center_x: 0.0,
        top,
        height: fig_h,
        fatness: s,
        sex,
        shade,
    };
    let margin = (fig.half_extent() + 1.0).min(0.5 * size - 1.0);
    fig.center_x = rng.random_range(margin..size - margin);
    Ok((fig, synthetic_bfp(s)?, height, weight))
}

/// Renders `spec.count` silhouettes into `out_dir/images/` and returns their
/// records (split unassigned). Image paths are relative to `out_dir`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::file(&img_dir, e))?;
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let (fig, bfp, height, weight) = sample_subject(spec, i)?;
        let img = fig.render(spec.image_size);
        let bbox = pixel_bbox(&img).ok_or_else(|| Error::Data(format!("sample {i} rendered empty")))?;
        let rel = format!("images/{i:06}.png");
        let path = out_dir.join(&rel);
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
        let record = SampleRecord {
            image_path: rel,
            bbox,
            bfp,
            sex: fig.sex,
            height,
            weight,
            bmi: compute_bmi(weight, height)?,
            split: Split::Unassigned,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

const MANIFEST_HEADER: [&str; 10] = [
    "image_path",
    "x",
    "y",
    "w",
    "h",
    "bfp",
    "sex",
    "height",
    "weight",
    "split",
];

pub fn save_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let io = |e: csv::Error| Error::file(path, std::io::Error::other(e));
    w.write_record(MANIFEST_HEADER).map_err(io)?;
    for r in records {
        w.write_record([
            r.image_path.clone(),
            r.bbox.x.to_string(),
            r.bbox.y.to_string(),
            r.bbox.w.to_string(),
            r.bbox.h.to_string(),
            r.bfp.to_string(),
            r.sex.to_string(),
            r.height.to_string(),
            r.weight.to_string(),
            r.split.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    parse_manifest(file)
}

/// Parses manifest text; line numbers in errors are 1-based and count the header.
pub fn parse_manifest(reader: impl std::io::Read) -> Result<Vec<SampleRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(i as u64 + 1, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 {
            if row.iter().ne(MANIFEST_HEADER) {
                return Err(Error::Parse {
                    line,
                    message: format!("expected header {}", MANIFEST_HEADER.join(",")),
                });
            }
            continue;
        }
        if row.len() != MANIFEST_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, got {}", MANIFEST_HEADER.len(), row.len()),
            });
        }
        let num = |k: usize| -> Result<f64> {
            row[k].trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("field {} is not a number: {:?}", MANIFEST_HEADER[k], &row[k]),
            })
        };
        let parsed = |k: usize, e: Error| Error::Parse {
            line,
            message: format!("field {}: {e}", MANIFEST_HEADER[k]),
        };
        let (height, weight) = (num(7)?, num(8)?);
        let record = SampleRecord {
            image_path: row[0].to_string(),
            bbox: BBox {
                x: num(1)?,
                y: num(2)?,
                w: num(3)?,
                h: num(4)?,
            },
            bfp: num(5)?,
            sex: row[6].parse().map_err(|e| parsed(6, e))?,
            height,
            weight,
            bmi: compute_bmi(weight, height).map_err(|e| Error::Data(format!("line {line}: {e}")))?,
            split: row[9].parse().map_err(|e| parsed(9, e))?,
        };
        record.validate().map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("line {line}: {m}")),
            other => other,
        })?;
        out.push(record);
    }
    Ok(out)
}

fn open_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8())
}

/// Grayscale pixels of an image file in `[0, 1]`, row-major, resized to
/// `size`×`size` with a triangle filter when the file has another size.
pub fn load_image(path: &Path, size: usize) -> Result<Vec<f64>> {
    let mut img = open_gray(path)?;
    if img.dimensions() != (size as u32, size as u32) {
        img = image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle);
    }
    Ok(img.pixels().map(|p| p.0[0] as f64 / 255.0).collect())
}

/// Images and targets held in memory, pixel values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub image_size: usize,
    /// Per sample, `image_size²` grayscale values.
    pub pixels: Vec<Vec<f64>>,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    /// Loads the images of `records`, resolving paths against `root`.
    pub fn load(records: &[SampleRecord], root: &Path, image_size: usize) -> Result<Self> {
        let mut pixels = Vec::with_capacity(records.len());
        for r in records {
            let path = root.join(&r.image_path);
            let img = open_gray(&path)?;
            if img.dimensions() != (image_size as u32, image_size as u32) {
                return Err(Error::Data(format!(
                    "{} is {}x{}, expected {image_size}x{image_size}",
                    path.display(),
                    img.width(),
                    img.height()
                )));
            }
            pixels.push(img.pixels().map(|p| p.0[0] as f64 / 255.0).collect());
        }
        Ok(Self {
            image_size,
            pixels,
            records: records.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `[B, 3, S, S]` batch (gray replicated over channels) and targets.
    /// `flip[i]` mirrors sample `i` horizontally.
    pub fn batch(&self, indices: &[usize], flip: &[bool]) -> (Tensor, Vec<DetectionTarget>) {
        let s = self.image_size;
        let plane = s * s;
        let mut data = Vec::with_capacity(indices.len() * 3 * plane);
        let mut targets = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            let src = &self.pixels[i];
            let mirrored = flip.get(k).copied().unwrap_or(false);
            let img: Vec<f64> = if mirrored {
                (0..plane).map(|p| src[(p / s) * s + (s - 1 - p % s)]).collect()
            } else {
                src.clone()
            };
            for _ in 0..3 {
                data.extend_from_slice(&img);
            }
            let mut t = self.records[i].target();
            if mirrored {
                for o in &mut t.objects {
                    o.x = 1.0 - o.x;
                }
            }
            targets.push(t);
        }
        (Tensor::from_parts(vec![indices.len(), 3, s, s], data), targets)
    }

    pub fn subset(&self, split: Split) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.records[i].split == split).collect();
        Dataset {
            image_size: self.image_size,
            pixels: keep.iter().map(|&i| self.pixels[i].clone()).collect(),
            records: keep.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

/// Number of records per BMI stratum, in stratum order.
pub fn stratum_counts(records: &[SampleRecord]) -> [usize; 6] {
    let mut c = [0; 6];
    for r in records {
        c[bmi_category(r.bmi) as usize] += 1;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(bmi: f64) -> SampleRecord {
        let height = 1.7;
        SampleRecord {
            image_path: "a.png".into(),
            bbox: BBox {
                x: 0.5,
                y: 0.5,
                w: 0.2,
                h: 0.6,
            },
            bfp: 20.0,
            sex: Sex::Female,
            height,
            weight: bmi * height * height,
            bmi: compute_bmi(bmi * height * height, height).unwrap(),
            split: Split::Unassigned,
        }
    }

    #[test]
    fn bfp_mapping() {
        assert_eq!(synthetic_bfp(0.0).unwrap(), 9.30);
        assert_eq!(synthetic_bfp(1.0).unwrap(), 57.60);
        assert!((synthetic_bfp(0.5).unwrap() - 33.45).abs() < 1e-12);
        assert!(synthetic_bfp(1.01).is_err());
        assert!(synthetic_bfp(-0.1).is_err());
    }

    #[test]
    fn bmi_examples() {
        assert!((compute_bmi(70.0, 1.75).unwrap() - 22.857142857142858).abs() < 1e-12);
        assert_eq!(compute_bmi(63.0, 1.0).unwrap(), 63.0);
        assert_eq!(
            compute_bmi(140.0, 1.75).unwrap(),
            2.0 * compute_bmi(70.0, 1.75).unwrap()
        );
        assert!(compute_bmi(0.0, 1.7).is_err());
        assert!(compute_bmi(70.0, -1.0).is_err());
    }

    #[test]
    fn bmi_strata() {
        assert_eq!(bmi_category(17.0).stratum(), 1);
        assert_eq!(bmi_category(18.5).stratum(), 2);
        assert_eq!(bmi_category(24.999).stratum(), 2);
        assert_eq!(bmi_category(25.0).stratum(), 3);
        assert_eq!(bmi_category(42.0).stratum(), 6);
    }

    #[test]
    fn split_single_stratum() {
        let mut recs: Vec<SampleRecord> = (0..10).map(|_| record(22.0)).collect();
        stratified_split(&mut recs, (0.8, 0.1, 0.1), 3).unwrap();
        let n = |s| recs.iter().filter(|r| r.split == s).count();
        assert_eq!((n(Split::Train), n(Split::Val), n(Split::Test)), (8, 1, 1));
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(stratified_split(&mut [], (0.8, 0.1, 0.1), 0).is_err());
        let mut recs = vec![record(22.0)];
        assert!(stratified_split(&mut recs, (0.8, 0.1, 0.2), 0).is_err());
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(1273, &[0.8, 0.1, 0.1]), vec![1019, 127, 127]);
        assert_eq!(largest_remainder(10, &[0.8, 0.1, 0.1]), vec![8, 1, 1]);
        assert_eq!(largest_remainder(3, &[0.5, 0.5]), vec![2, 1]);
    }

    proptest! {
        #[test]
        fn split_is_partition_with_bounded_deviation(
            bmis in proptest::collection::vec(14.0f64..45.0, 1..300),
            seed in 0u64..1000,
            a in 0.05f64..0.9,
        ) {
            let b = (1.0 - a) / 2.0;
            let ratios = (a, b, 1.0 - a - b);
            let mut recs: Vec<SampleRecord> = bmis.iter().map(|&m| record(m)).collect();
            stratified_split(&mut recs, ratios, seed).unwrap();
            prop_assert!(recs.iter().all(|r| r.split != Split::Unassigned));
            let totals = largest_remainder(recs.len(), &[ratios.0, ratios.1, ratios.2]);
            for (j, s) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
                prop_assert_eq!(recs.iter().filter(|r| r.split == s).count(), totals[j]);
                for cat in BmiCategory::ALL {
                    let members: Vec<_> = recs.iter().filter(|r| bmi_category(r.bmi) == cat).collect();
                    let got = members.iter().filter(|r| r.split == s).count() as f64;
                    let exact = members.len() as f64 * [ratios.0, ratios.1, ratios.2][j];
                    prop_assert!((got - exact).abs() <= 1.0, "{:?} {:?}: {} vs {}", cat, s, got, exact);
                }
            }
        }

        #[test]
        fn torso_width_is_monotone(s1 in 0.0f64..1.0, ds in 1e-6f64..1.0, male in any::<bool>()) {
            let s2 = (s1 + ds).min(1.0);
            prop_assume!(s2 > s1);
            let sex = if male { Sex::Male } else { Sex::Female };
            let fig = |s| Silhouette { center_x: 32.0, top: 2.0, height: 50.0, fatness: s, sex, shade: 60 };
            prop_assert!(fig(s1).torso_half_width() < fig(s2).torso_half_width());
        }

        #[test]
        fn bfp_is_recoverable(s in 0.0f64..=1.0) {
            let b = synthetic_bfp(s).unwrap();
            prop_assert!((fatness_of(b) - s).abs() < 1e-12);
            prop_assert!((BFP_MIN..=BFP_MAX).contains(&b));
        }
    }

    #[test]
    fn split_is_deterministic() {
        let mut a: Vec<SampleRecord> = (0..50).map(|i| record(15.0 + i as f64 * 0.6)).collect();
        let mut b = a.clone();
        stratified_split(&mut a, (0.8, 0.1, 0.1), 9).unwrap();
        stratified_split(&mut b, (0.8, 0.1, 0.1), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_parse_errors() {
        let header = MANIFEST_HEADER.join(",");
        let bad_bfp = format!("{header}\nimg.png,0.5,0.5,0.2,0.6,5.0,M,1.8,80,train\n");
        match parse_manifest(bad_bfp.as_bytes()) {
            Err(Error::Data(m)) => assert!(m.contains("bfp"), "{m}"),
            other => panic!("expected data error, got {other:?}"),
        }
        let missing =
            format!("{header}\nimg.png,0.5,0.5,0.2,0.6,20.0,M,1.8,80,train\nimg.png,0.5,0.5,0.2,0.6,20.0,M,1.8\n");
        match parse_manifest(missing.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_sex = format!("{header}\nimg.png,0.5,0.5,0.2,0.6,20.0,X,1.8,80,train\n");
        assert!(matches!(
            parse_manifest(bad_sex.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_manifest("nope\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<SampleRecord> = (0..7).map(|i| record(16.0 + 3.3 * i as f64)).collect();
        let path = dir.path().join("m.csv");
        save_manifest(&path, &recs).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), recs);
    }

    #[test]
    fn generator_bbox_matches_pixel_scan() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            count: 12,
            image_size: 48,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let recs = generate_synthetic_dataset(&spec, dir.path()).unwrap();
        for r in &recs {
            let img = image::open(dir.path().join(&r.image_path)).unwrap().to_luma8();
            let (w, h) = img.dimensions();
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
            for y in 0..h {
                for x in 0..w {
                    if img.get_pixel(x, y).0[0] != 255 {
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x);
                        y1 = y1.max(y);
                    }
                }
            }
            assert!(x1 >= x0 && y1 >= y0);
            let s = w as f64;
            assert_eq!(r.bbox.w, (x1 - x0 + 1) as f64 / s);
            assert_eq!(r.bbox.h, (y1 - y0 + 1) as f64 / s);
            assert_eq!(r.bbox.x, (x0 + x1 + 1) as f64 / (2.0 * s));
            assert_eq!(r.bbox.y, (y0 + y1 + 1) as f64 / (2.0 * s));
            assert!(r.bbox.x - r.bbox.w / 2.0 >= 0.0 && r.bbox.x + r.bbox.w / 2.0 <= 1.0);
            assert!((BFP_MIN..=BFP_MAX).contains(&r.bfp));
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = SyntheticSpec {
            count: 10,
            image_size: 32,
            seed: 42,
            ..SyntheticSpec::default()
        };
        let ra = generate_synthetic_dataset(&spec, a.path()).unwrap();
        let rb = generate_synthetic_dataset(&spec, b.path()).unwrap();
        assert_eq!(ra, rb);
        for r in &ra {
            let fa = std::fs::read(a.path().join(&r.image_path)).unwrap();
            let fb = std::fs::read(b.path().join(&r.image_path)).unwrap();
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn generator_rejects_bad_spec() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            image_size: 16,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic_dataset(&spec, dir.path()).is_err());
    }

    #[test]
    fn batch_flip_mirrors_box() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            count: 2,
            image_size: 32,
            seed: 1,
            ..SyntheticSpec::default()
        };
        let recs = generate_synthetic_dataset(&spec, dir.path()).unwrap();
        let ds = Dataset::load(&recs, dir.path(), 32).unwrap();
        let (plain, t0) = ds.batch(&[0], &[false]);
        let (flipped, t1) = ds.batch(&[0], &[true]);
        assert_eq!(plain.shape(), &[1, 3, 32, 32]);
        assert_eq!(plain.get(&[0, 1, 4, 3]), flipped.get(&[0, 1, 4, 28]));
        assert!((t0[0].objects[0].x + t1[0].objects[0].x - 1.0).abs() < 1e-15);
        assert!(Dataset::load(&recs, dir.path(), 64).is_err());
    }
}
