//! Independent metric oracles shared by the metric tests and the acceptance suite:
//! an S-measure that follows the reference structure-measure procedure line by line
//! (1-based, column-major habits kept where they matter) and F-max by exhaustive
//! binarization search.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Beta squared of the F-measure, restated rather than imported.
const BETA2: f64 = 0.3;

/// Matrix stored as rows of columns, indexed 1-based through `at`.
pub struct Mat {
    rows: usize,
    cols: usize,
    v: Vec<Vec<f64>>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, flat: &[f64]) -> Mat {
        let v = (0..rows).map(|r| flat[r * cols..(r + 1) * cols].to_vec()).collect();
        Mat { rows, cols, v }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.v[r - 1][c - 1]
    }

    /// Sub-block `r0..=r1`, `c0..=c1` (1-based, inclusive).
    fn block(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Mat {
        let mut flat = Vec::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                flat.push(self.at(r, c));
            }
        }
        Mat::new(r1 + 1 - r0, c1 + 1 - c0, &flat)
    }

    fn values(&self) -> Vec<f64> {
        self.v.iter().flatten().copied().collect()
    }

    fn mean2(&self) -> f64 {
        let v = self.values();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

const EPS: f64 = 2.220446049250313e-16;

fn std_unbiased(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn object(values_on_mask: &[f64]) -> f64 {
    if values_on_mask.is_empty() {
        return 0.0;
    }
    let x = values_on_mask.iter().sum::<f64>() / values_on_mask.len() as f64;
    let sigma_x = std_unbiased(values_on_mask);
    2.0 * x / (x * x + 1.0 + sigma_x + EPS)
}

fn s_object(pred: &Mat, gt: &Mat) -> f64 {
    let (p, g) = (pred.values(), gt.values());
    let fg: Vec<f64> = p.iter().zip(&g).filter(|(_, &m)| m == 1.0).map(|(&x, _)| x).collect();
    let bg: Vec<f64> = p
        .iter()
        .zip(&g)
        .filter(|(_, &m)| m == 0.0)
        .map(|(&x, _)| 1.0 - x)
        .collect();
    let u = gt.mean2();
    u * object(&fg) + (1.0 - u) * object(&bg)
}

/// MATLAB `round`: half away from zero.
fn matlab_round(x: f64) -> usize {
    x.round() as usize
}

fn centroid(gt: &Mat) -> (usize, usize) {
    let total: f64 = gt.values().iter().sum();
    if total == 0.0 {
        return (matlab_round(gt.cols as f64 / 2.0), matlab_round(gt.rows as f64 / 2.0));
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    for i in 1..=gt.cols {
        let col_sum: f64 = (1..=gt.rows).map(|j| gt.at(j, i)).sum();
        sx += col_sum * i as f64;
    }
    for j in 1..=gt.rows {
        let row_sum: f64 = (1..=gt.cols).map(|i| gt.at(j, i)).sum();
        sy += row_sum * j as f64;
    }
    (matlab_round(sx / total), matlab_round(sy / total))
}

fn ssim(pred: &Mat, gt: &Mat) -> f64 {
    let n = (pred.rows * pred.cols) as f64;
    let x = pred.mean2();
    let y = gt.mean2();
    let (p, g) = (pred.values(), gt.values());
    let sigma_x2 = p.iter().map(|a| (a - x).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let sigma_y2 = g.iter().map(|b| (b - y).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let sigma_xy = p.iter().zip(&g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / (n - 1.0 + EPS);
    let alpha = 4.0 * x * y * sigma_xy;
    let beta = (x * x + y * y) * (sigma_x2 + sigma_y2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &Mat, gt: &Mat) -> f64 {
    let (x, y) = centroid(gt);
    let (hei, wid) = (gt.rows, gt.cols);
    let area = (wid * hei) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = ((wid - x) * y) as f64 / area;
    let w3 = (x * (hei - y)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    // (row range, column range, weight); empty blocks carry zero weight and are skipped.
    let quads = [
        ((1, y), (1, x), w1),
        ((1, y), (x + 1, wid), w2),
        ((y + 1, hei), (1, x), w3),
        ((y + 1, hei), (x + 1, wid), w4),
    ];
    let mut q = 0.0;
    for ((r0, r1), (c0, c1), w) in quads {
        if r0 > r1 || c0 > c1 {
            continue;
        }
        q += w * ssim(&pred.block(r0, r1, c0, c1), &gt.block(r0, r1, c0, c1));
    }
    q
}

pub fn structure_measure(pred: &Mat, gt: &Mat) -> f64 {
    let y = gt.mean2();
    if y == 0.0 {
        1.0 - pred.mean2()
    } else if y == 1.0 {
        pred.mean2()
    } else {
        let q = 0.5 * s_object(pred, gt) + 0.5 * s_region(pred, gt);
        q.max(0.0)
    }
}

pub fn random_gt(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<bool> {
    // Mix of blobs and noise, so centroids land anywhere including borders.
    let mode = rng.random_range(0..4);
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            match mode {
                0 => rng.random_bool(0.3),
                1 => (y - 5.0).powi(2) + (x - 9.0).powi(2) < 20.0,
                2 => x < 3.0,
                _ => y > 12.0 || rng.random_bool(0.05),
            }
        })
        .collect()
}

/// F-max by enumerating every binarization `S8 >= v` over the distinct values of the
/// map, plus the empty prediction.
pub fn brute_force_f_max(s8: &[u8], g: &[bool]) -> f64 {
    let mut cuts: Vec<u8> = s8.to_vec();
    cuts.sort_unstable();
    cuts.dedup();
    let positives = g.iter().filter(|&&m| m).count();
    let mut best: f64 = 0.0; // the empty prediction scores (P, R) = (1, 0), F = 0
    for v in cuts {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&x, &m) in s8.iter().zip(g) {
            if x >= v {
                if m {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / positives as f64;
        let f = if BETA2 * p + r == 0.0 {
            0.0
        } else {
            (1.0 + BETA2) * p * r / (BETA2 * p + r)
        };
        best = best.max(f);
    }
    best
}
