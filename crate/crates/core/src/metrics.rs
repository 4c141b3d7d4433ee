//! Saliency evaluation: MAE, precision/recall over 256 thresholds, F-measure,
//! S-measure, and dataset-level reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_gray, ImageArray};
use crate::error::{Error, Result};

/// Weight of precision in the F-measure.
pub const BETA2: f64 = 0.3;
/// Balance between the object and region terms of the S-measure.
pub const S_ALPHA: f64 = 0.5;
/// Number of binarization thresholds.
pub const NUM_THRESHOLDS: usize = 256;

/// Machine epsilon of `f64`, as used by the reference structure-measure code.
const EPS: f64 = f64::EPSILON;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("maps have {a} and {b} pixels")));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(s: &[f64], g: &[f64]) -> Result<f64> {
    check_len(s.len(), g.len())?;
    if s.is_empty() {
        return Err(Error::Shape("empty maps".into()));
    }
    Ok(s.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.len() as f64)
}

/// Per-value counts of foreground and background pixels of an 8-bit map.
#[derive(Debug, Clone)]
pub struct Histogram {
    fg: [u64; NUM_THRESHOLDS],
    bg: [u64; NUM_THRESHOLDS],
}

impl Histogram {
    pub fn new(s8: &[u8], g: &[bool]) -> Result<Self> {
        check_len(s8.len(), g.len())?;
        let mut h = Histogram {
            fg: [0; NUM_THRESHOLDS],
            bg: [0; NUM_THRESHOLDS],
        };
        for (&v, &m) in s8.iter().zip(g) {
            if m {
                h.fg[v as usize] += 1;
            } else {
                h.bg[v as usize] += 1;
            }
        }
        Ok(h)
    }

    pub fn foreground(&self) -> u64 {
        self.fg.iter().sum()
    }

    /// `(P, R)` for every threshold `t`, predicting positive where `S8 ≥ t`.
    pub fn pr_curve(&self) -> Result<Vec<(f64, f64)>> {
        let total_fg = self.foreground();
        if total_fg == 0 {
            return Err(Error::Range(
                "precision/recall is undefined for an empty ground truth".into(),
            ));
        }
        let mut out = vec![(0.0, 0.0); NUM_THRESHOLDS];
        let (mut tp, mut fp) = (0u64, 0u64);
        for t in (0..NUM_THRESHOLDS).rev() {
            tp += self.fg[t];
            fp += self.bg[t];
            out[t] = if tp + fp == 0 {
                (1.0, 0.0)
            } else {
                (tp as f64 / (tp + fp) as f64, tp as f64 / total_fg as f64)
            };
        }
        Ok(out)
    }
}

/// Precision and recall of `S8 ≥ t` against a binary ground truth.
pub fn pr_at_threshold(s8: &[u8], g: &[bool], t: u8) -> Result<(f64, f64)> {
    Ok(Histogram::new(s8, g)?.pr_curve()?[t as usize])
}

/// Weighted harmonic mean of precision and recall; 0 when the denominator vanishes.
pub fn f_measure(p: f64, r: f64, beta2: f64) -> f64 {
    let den = beta2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / den
    }
}

/// Maximum F-measure over a precision/recall sweep.
pub fn f_max_of_curve(curve: &[(f64, f64)]) -> f64 {
    curve.iter().map(|&(p, r)| f_measure(p, r, BETA2)).fold(0.0, f64::max)
}

/// Per-image maximum F-measure over all 256 thresholds.
pub fn f_max(s8: &[u8], g: &[bool]) -> Result<f64> {
    Ok(f_max_of_curve(&Histogram::new(s8, g)?.pr_curve()?))
}

/// One row of a PR curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: u8,
    pub precision: f64,
    pub recall: f64,
}

/// Mean precision and recall per threshold over images with non-empty ground truth.
pub fn pr_curve(images: &[(&[u8], &[bool])]) -> Result<Vec<PrPoint>> {
    let mut sums = vec![(0.0, 0.0); NUM_THRESHOLDS];
    let mut n = 0usize;
    for &(s8, g) in images {
        let h = Histogram::new(s8, g)?;
        if h.foreground() == 0 {
            continue;
        }
        for (acc, (p, r)) in sums.iter_mut().zip(h.pr_curve()?) {
            acc.0 += p;
            acc.1 += r;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Range("no image with a non-empty ground truth".into()));
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(t, (p, r))| PrPoint {
            threshold: t as u8,
            precision: p / n as f64,
            recall: r / n as f64,
        })
        .collect())
}

fn mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

/// Sample standard deviation (N−1 denominator); 0 for fewer than two values.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = values.iter().sum::<f64>() / values.len() as f64;
    2.0 * x / (x * x + 1.0 + std_dev(values) + EPS)
}

fn s_object(s: &[f64], g: &[bool]) -> f64 {
    let fg: Vec<f64> = s.iter().zip(g).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
    let bg: Vec<f64> = s.iter().zip(g).filter(|(_, &m)| !m).map(|(v, _)| 1.0 - v).collect();
    let u = fg.len() as f64 / g.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Round half away from zero.
fn round_half_away(x: f64) -> usize {
    x.round() as usize
}

/// 1-based centroid `(X, Y)` of the foreground; image centre for an empty mask.
fn centroid(g: &[bool], h: usize, w: usize) -> (usize, usize) {
    let total = g.iter().filter(|&&m| m).count();
    if total == 0 {
        return (round_half_away(w as f64 / 2.0), round_half_away(h as f64 / 2.0));
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[y * w + x] {
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
            }
        }
    }
    (round_half_away(sx / total as f64), round_half_away(sy / total as f64))
}

/// Structural similarity of one region, following the reference definition.
fn region_ssim(s: &[f64], g: &[f64]) -> f64 {
    let n = s.len() as f64;
    let x = s.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let den = n - 1.0 + EPS;
    let sx2 = s.iter().map(|v| (v - x).powi(2)).sum::<f64>() / den;
    let sy2 = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / den;
    let sxy = s.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / den;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(s: &[f64], g: &[bool], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(g, h, w);
    let area = (h * w) as f64;
    let quadrants = [(0..cy, 0..cx), (0..cy, cx..w), (cy..h, 0..cx), (cy..h, cx..w)];
    let mut q = 0.0;
    for (rows, cols) in quadrants {
        let count = rows.len() * cols.len();
        if count == 0 {
            continue;
        }
        let mut sv = Vec::with_capacity(count);
        let mut gv = Vec::with_capacity(count);
        for y in rows {
            for x in cols.clone() {
                sv.push(s[y * w + x]);
                gv.push(if g[y * w + x] { 1.0 } else { 0.0 });
            }
        }
        q += count as f64 / area * region_ssim(&sv, &gv);
    }
    q
}

/// Structure measure of a prediction in [0,1] against a binary mask, both `h`×`w`.
pub fn s_measure(s: &[f64], g: &[bool], h: usize, w: usize) -> Result<f64> {
    check_len(s.len(), g.len())?;
    check_len(s.len(), h * w)?;
    let (fg_mean, _) = mean(g.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    let (pred_mean, _) = mean(s.iter().copied());
    Ok(if fg_mean == 0.0 {
        1.0 - pred_mean
    } else if fg_mean == 1.0 {
        pred_mean
    } else {
        (S_ALPHA * s_object(s, g) + (1.0 - S_ALPHA) * s_region(s, g, h, w)).max(0.0)
    })
}

/// Dataset-level evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n_images: usize,
    pub mae: f64,
    pub f_max: f64,
    pub s_measure: f64,
    /// Images with an empty ground truth, excluded from PR and F-measure.
    pub skipped: Vec<String>,
    /// File name of the PR curve CSV, relative to the report.
    pub pr_curve_csv: String,
    #[serde(skip)]
    pub pr_curve: Vec<PrPoint>,
}

/// Per-image metrics of one prediction/ground-truth pair.
#[derive(Debug, Clone)]
pub struct ImageScores {
    pub mae: f64,
    pub s_measure: f64,
    pub s8: Vec<u8>,
    pub gt: Vec<bool>,
}

/// Score `pred` (values in [0,1]) against `gt` (values in [0,1], binarized at 0.5),
/// resizing the prediction bilinearly to the ground-truth size first.
pub fn score_image(pred: &ImageArray, gt: &ImageArray) -> Result<ImageScores> {
    let pred = pred.resize(gt.height, gt.width);
    let s: Vec<f64> = pred.plane(0).iter().map(|&v| v.clamp(0.0, 1.0) as f64).collect();
    let g_bin: Vec<bool> = gt.plane(0).iter().map(|&v| v >= 0.5).collect();
    let g: Vec<f64> = g_bin.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok(ImageScores {
        mae: mae(&s, &g)?,
        s_measure: s_measure(&s, &g_bin, gt.height, gt.width)?,
        s8: s.iter().map(|&v| (v * 255.0).round() as u8).collect(),
        gt: g_bin,
    })
}

/// Average per-image scores into a report.
pub fn aggregate(dataset: &str, ids: &[String], scores: &[ImageScores]) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let n = scores.len() as f64;
    let skipped: Vec<String> = ids
        .iter()
        .zip(scores)
        .filter(|(_, s)| !s.gt.iter().any(|&m| m))
        .map(|(id, _)| id.clone())
        .collect();
    let pairs: Vec<(&[u8], &[bool])> = scores.iter().map(|s| (s.s8.as_slice(), s.gt.as_slice())).collect();
    let (curve, f_max) = if skipped.len() == scores.len() {
        (Vec::new(), 0.0)
    } else {
        let curve = pr_curve(&pairs)?;
        let pr: Vec<(f64, f64)> = curve.iter().map(|p| (p.precision, p.recall)).collect();
        let f = f_max_of_curve(&pr);
        (curve, f)
    };
    Ok(EvalReport {
        dataset: dataset.to_string(),
        n_images: scores.len(),
        mae: scores.iter().map(|s| s.mae).sum::<f64>() / n,
        f_max,
        s_measure: scores.iter().map(|s| s.s_measure).sum::<f64>() / n,
        skipped,
        pr_curve_csv: "pr_curve.csv".into(),
        pr_curve: curve,
    })
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", dir.display())));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        if let (true, Some(stem)) = (is_png, stem) {
            if !stem.ends_with(".edge") {
                out.insert(stem, path);
            }
        }
    }
    Ok(out)
}

/// Evaluate every `<id>.png` in `pred_dir` against `<id>.png` in `gt_dir`.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let preds = png_stems(pred_dir)?;
    let gts = png_stems(gt_dir)?;
    let missing_pred: Vec<&String> = gts.keys().filter(|k| !preds.contains_key(*k)).collect();
    let missing_gt: Vec<&String> = preds.keys().filter(|k| !gts.contains_key(*k)).collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        let list = |v: &[&String]| v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        return Err(Error::Dataset(format!(
            "unmatched ids; without prediction: [{}]; without ground truth: [{}]",
            list(&missing_pred),
            list(&missing_gt)
        )));
    }
    if gts.is_empty() {
        return Err(Error::Dataset(format!("no ground-truth maps in {}", gt_dir.display())));
    }
    let mut ids = Vec::with_capacity(gts.len());
    let mut scores = Vec::with_capacity(gts.len());
    for (id, gt_path) in &gts {
        let pred = read_gray(&preds[id])?;
        let gt = read_gray(gt_path)?;
        scores.push(score_image(&pred, &gt)?);
        ids.push(id.clone());
    }
    let name = gt_dir
        .parent()
        .filter(|_| gt_dir.file_name().is_some_and(|n| n == "gt"))
        .unwrap_or(gt_dir)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    aggregate(&name, &ids, &scores)
}

/// `threshold,precision,recall` with one row per threshold.
pub fn pr_curve_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall);
    }
    out
}

/// Write `<stem>.json` and the PR CSV next to it; returns both paths.
pub fn write_report(report: &EvalReport, json_path: &Path) -> Result<(PathBuf, PathBuf)> {
    let dir = json_path.parent().unwrap_or(Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let stem = json_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let csv_name = format!("{stem}_pr_curve.csv");
    let mut report = report.clone();
    report.pr_curve_csv = csv_name.clone();
    let csv_path = dir.join(&csv_name);
    std::fs::write(json_path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(json_path, e))?;
    std::fs::write(&csv_path, pr_curve_csv(&report.pr_curve)).map_err(|e| Error::io(&csv_path, e))?;
    Ok((json_path.to_path_buf(), csv_path))
}
