//! Saliency evaluation: S-measure, max F-measure, max E-measure and MAE.
//!
//! Maps are binarized at 256 evenly spaced thresholds `t = i / 255` with the
//! strict rule `pred > t`, so an all-zero prediction never produces a
//! foreground pixel.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::io as img_io;
use crate::error::{contract_err, shape_err, Error, Result};

pub const F_BETA_SQ: f64 = 0.3;
pub const N_THRESHOLDS: usize = 256;
/// Guard constant for the S-measure and E-measure denominators.
pub const GUARD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub stem: String,
    pub group: String,
}

impl SaliencyMap {
    /// Values are clamped into `[0, 1]`.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(shape_err!(
                "saliency map {height}x{width} given {} values",
                values.len()
            ));
        }
        Ok(SaliencyMap {
            height,
            width,
            values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            stem: String::new(),
            group: String::new(),
        })
    }

    pub fn with_name(mut self, group: &str, stem: &str) -> Self {
        self.group = group.to_string();
        self.stem = stem.to_string();
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    /// Bilinear resample to a new size.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let v = crate::kernels::resize_forward(&self.values, 1, self.height, self.width, height, width);
        Ok(SaliencyMap::new(height, width, v)?.with_name(&self.group, &self.stem))
    }
}

fn check_sizes(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(shape_err!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        ));
    }
    Ok(())
}

pub fn thresholds() -> impl Iterator<Item = f64> {
    (0..N_THRESHOLDS).map(|i| i as f64 / (N_THRESHOLDS - 1) as f64)
}

pub fn mae(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_sizes(pred, gt)?;
    let total: f64 = pred.values.iter().zip(&gt.values).map(|(p, g)| (p - g).abs()).sum();
    Ok(total / pred.values.len().max(1) as f64)
}

/// Prediction values split by ground-truth label and sorted, so counts of
/// `pred > t` come from binary searches.
struct SortedSplit {
    fg: Vec<f64>,
    bg: Vec<f64>,
}

impl SortedSplit {
    fn new(pred: &SaliencyMap, gt: &SaliencyMap) -> Self {
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for (&p, &g) in pred.values.iter().zip(&gt.values) {
            if g > 0.5 {
                fg.push(p);
            } else {
                bg.push(p);
            }
        }
        fg.sort_by(f64::total_cmp);
        bg.sort_by(f64::total_cmp);
        SortedSplit { fg, bg }
    }

    /// `(true positives, false positives)` for the rule `pred > t`.
    fn counts_above(&self, t: f64) -> (usize, usize) {
        let above = |v: &[f64]| v.len() - v.partition_point(|&x| x <= t);
        (above(&self.fg), above(&self.bg))
    }
}

/// F-beta with `beta^2 = 0.3` from a confusion count.
pub fn f_beta(tp: usize, fp: usize, positives: usize) -> f64 {
    let predicted = tp + fp;
    let precision = if predicted == 0 { 1.0 } else { tp as f64 / predicted as f64 };
    let recall = if positives == 0 { 0.0 } else { tp as f64 / positives as f64 };
    let denom = F_BETA_SQ * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + F_BETA_SQ) * precision * recall / denom
    }
}

pub fn f_measure_max(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_sizes(pred, gt)?;
    let split = SortedSplit::new(pred, gt);
    if split.fg.is_empty() {
        return Err(contract_err!("f_measure_max: ground truth has no foreground"));
    }
    Ok(thresholds()
        .map(|t| {
            let (tp, fp) = split.counts_above(t);
            f_beta(tp, fp, split.fg.len())
        })
        .fold(0.0, f64::max))
}

/// Enhanced-alignment score of a binarized prediction summarized by its
/// confusion counts.
fn e_score_from_counts(tp: usize, fp: usize, n_fg: usize, n_bg: usize) -> f64 {
    let n = (n_fg + n_bg) as f64;
    let positives = (tp + fp) as f64;
    if n_fg == 0 {
        return 1.0 - positives / n;
    }
    if n_bg == 0 {
        return positives / n;
    }
    let mean_b = positives / n;
    let mean_g = n_fg as f64 / n;
    let cell = |g: f64, b: f64| {
        let (pg, pb) = (g - mean_g, b - mean_b);
        let align = 2.0 * pg * pb / (pg * pg + pb * pb + GUARD);
        (align + 1.0).powi(2) / 4.0
    };
    let fn_ = n_fg - tp;
    let tn = n_bg - fp;
    (tp as f64 * cell(1.0, 1.0)
        + fn_ as f64 * cell(1.0, 0.0)
        + fp as f64 * cell(0.0, 1.0)
        + tn as f64 * cell(0.0, 0.0))
        / n
}

/// E-measure of the map binarized at a single threshold.
pub fn e_measure_at(pred: &SaliencyMap, gt: &SaliencyMap, t: f64) -> Result<f64> {
    check_sizes(pred, gt)?;
    let split = SortedSplit::new(pred, gt);
    let (tp, fp) = split.counts_above(t);
    Ok(e_score_from_counts(tp, fp, split.fg.len(), split.bg.len()))
}

pub fn e_measure_max(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_sizes(pred, gt)?;
    let split = SortedSplit::new(pred, gt);
    Ok(thresholds()
        .map(|t| {
            let (tp, fp) = split.counts_above(t);
            e_score_from_counts(tp, fp, split.fg.len(), split.bg.len())
        })
        .fold(0.0, f64::max))
}

/// Round half to even, matching the usual array-library convention.
fn round_half_even(x: f64) -> f64 {
    let r = x.round();
    if (x - x.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - x.signum()
    } else {
        r
    }
}

#[derive(Clone, Copy)]
struct Block {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

/// Sample standard deviation; zero for fewer than two values.
fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

fn object_similarity(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = sample_std(values, mean);
    2.0 * mean / (mean * mean + 1.0 + std + GUARD)
}

fn s_object(pred: &SaliencyMap, gt: &SaliencyMap) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        if g > 0.5 {
            fg.push(p);
        } else {
            bg.push(1.0 - p);
        }
    }
    let mu = fg.len() as f64 / pred.values.len() as f64;
    mu * object_similarity(&fg) + (1.0 - mu) * object_similarity(&bg)
}

fn block_ssim(pred: &SaliencyMap, gt: &SaliencyMap, b: Block) -> f64 {
    let n = (b.y1 - b.y0) * (b.x1 - b.x0);
    if n == 0 {
        return 0.0;
    }
    let iter = || (b.y0..b.y1).flat_map(move |y| (b.x0..b.x1).map(move |x| (y, x)));
    let mx = iter().map(|(y, x)| pred.at(y, x)).sum::<f64>() / n as f64;
    let my = iter().map(|(y, x)| gt.at(y, x)).sum::<f64>() / n as f64;
    let denom = (n.max(2) - 1) as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (y, x) in iter() {
        let dx = pred.at(y, x) - mx;
        let dy = gt.at(y, x) - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (sxx, syy, sxy) = (sxx / denom, syy / denom, sxy / denom);
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + GUARD)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &SaliencyMap, gt: &SaliencyMap) -> f64 {
    let (h, w) = (gt.height, gt.width);
    let mut count = 0usize;
    let (mut sy, mut sx) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if gt.at(y, x) > 0.5 {
                count += 1;
                sy += y as f64;
                sx += x as f64;
            }
        }
    }
    // Split point: one past the rounded foreground centroid.
    let (cx, cy) = if count == 0 {
        (round_half_even(w as f64 / 2.0), round_half_even(h as f64 / 2.0))
    } else {
        (round_half_even(sx / count as f64), round_half_even(sy / count as f64))
    };
    let cx = (cx as usize + 1).min(w);
    let cy = (cy as usize + 1).min(h);
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let blocks = [
        Block { y0: 0, y1: cy, x0: 0, x1: cx },
        Block { y0: 0, y1: cy, x0: cx, x1: w },
        Block { y0: cy, y1: h, x0: 0, x1: cx },
        Block { y0: cy, y1: h, x0: cx, x1: w },
    ];
    [w1, w2, w3, w4]
        .iter()
        .zip(blocks)
        .map(|(wt, b)| if *wt == 0.0 { 0.0 } else { wt * block_ssim(pred, gt, b) })
        .sum()
}

/// Structure measure with equal object and region weights.
pub fn s_measure(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_sizes(pred, gt)?;
    let y = gt.values.iter().filter(|&&g| g > 0.5).count() as f64 / gt.values.len() as f64;
    let s = if y == 0.0 {
        1.0 - pred.mean()
    } else if y == 1.0 {
        pred.mean()
    } else {
        0.5 * s_object(pred, gt) + 0.5 * s_region(pred, gt)
    };
    Ok(s.clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub s_measure: f64,
    pub f_max: f64,
    pub e_max: f64,
    pub mae: f64,
}

/// All four measures for one prediction. Max-F is reported as 0 for empty
/// ground truths.
pub fn score_pair(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<Scores> {
    let has_fg = gt.values.iter().any(|&g| g > 0.5);
    Ok(Scores {
        s_measure: s_measure(pred, gt)?,
        f_max: if has_fg { f_measure_max(pred, gt)? } else { 0.0 },
        e_max: e_measure_max(pred, gt)?,
        mae: mae(pred, gt)?,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupScores {
    pub scores: Scores,
    pub images: usize,
}

/// One row per dataset plus a per-group breakdown; every value is a mean of
/// per-image scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub s_measure: f64,
    pub f_max: f64,
    pub e_max: f64,
    pub mae: f64,
    pub images: usize,
    pub groups: BTreeMap<String, GroupScores>,
}

impl MetricsReport {
    pub fn scores(&self) -> Scores {
        Scores {
            s_measure: self.s_measure,
            f_max: self.f_max,
            e_max: self.e_max,
            mae: self.mae,
        }
    }

    /// TSV with columns `dataset, group, S, Fmax, Emax, MAE`; the dataset
    /// row uses group `*`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("dataset\tgroup\tS\tFmax\tEmax\tMAE\n");
        let row = |out: &mut String, group: &str, s: &Scores| {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                self.dataset, group, s.s_measure, s.f_max, s.e_max, s.mae
            );
        };
        row(&mut out, "*", &self.scores());
        for (g, gs) in &self.groups {
            row(&mut out, g, &gs.scores);
        }
        out
    }

    /// Fixed-width table in the usual leaderboard column order (E, S, F, MAE).
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>8} {:>8}", "dataset", "Emax", "S", "Fmax", "MAE");
        let _ = writeln!(
            out,
            "{:<16} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            self.dataset, self.e_max, self.s_measure, self.f_max, self.mae
        );
        out
    }
}

/// Averages per-image scores of `(prediction, ground truth)` pairs. Each
/// prediction is resized to its ground truth's size first.
pub fn evaluate_maps(dataset: &str, pairs: &[(SaliencyMap, SaliencyMap)]) -> Result<MetricsReport> {
    let mut report = MetricsReport {
        dataset: dataset.to_string(),
        ..Default::default()
    };
    let mut total = Scores::default();
    for (pred, gt) in pairs {
        let pred = pred.resized(gt.height, gt.width)?;
        let s = score_pair(&pred, gt)?;
        add_scores(&mut total, &s);
        let entry = report.groups.entry(gt.group.clone()).or_default();
        add_scores(&mut entry.scores, &s);
        entry.images += 1;
    }
    report.images = pairs.len();
    let n = pairs.len().max(1) as f64;
    report.s_measure = total.s_measure / n;
    report.f_max = total.f_max / n;
    report.e_max = total.e_max / n;
    report.mae = total.mae / n;
    for gs in report.groups.values_mut() {
        let k = gs.images as f64;
        gs.scores = Scores {
            s_measure: gs.scores.s_measure / k,
            f_max: gs.scores.f_max / k,
            e_max: gs.scores.e_max / k,
            mae: gs.scores.mae / k,
        };
    }
    Ok(report)
}

fn add_scores(acc: &mut Scores, s: &Scores) {
    acc.s_measure += s.s_measure;
    acc.f_max += s.f_max;
    acc.e_max += s.e_max;
    acc.mae += s.mae;
}

/// Evaluates every `gt_root/<group>/<stem>.png` against
/// `pred_root/<group>/<stem>.png`.
pub fn evaluate_dataset(pred_root: &Path, gt_root: &Path) -> Result<MetricsReport> {
    let listing = crate::data::list_layout(gt_root)?;
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for (group, stems) in &listing {
        for (stem, gt_path) in stems {
            let pred_path = pred_root.join(group).join(format!("{stem}.png"));
            if !pred_path.is_file() {
                missing.push(format!("{group}/{stem}"));
                continue;
            }
            let gt = img_io::load_mask(gt_path)?.with_name(group, stem);
            let pred = img_io::load_gray(&pred_path)?.with_name(group, stem);
            pairs.push((pred, gt));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Eval(format!("missing predictions for: {}", missing.join(", "))));
    }
    let name = gt_root
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| gt_root.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    evaluate_maps(&name, &pairs)
}
