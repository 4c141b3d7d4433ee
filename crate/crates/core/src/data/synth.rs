//! Deterministic synthetic RGB-D scenes: a smooth background, low-contrast distractor
//! shapes at mid depth and one salient shape nearest the camera.
//!
//! Depth is degraded like a consumer sensor: it is sampled on a grid coarser than the
//! image, upsampled bilinearly and perturbed with Gaussian noise. A fraction of scenes
//! get a poor depth map (coarser grid, heavier noise), so depth reliably says which
//! shape is salient only on average and RGB is needed for the boundary.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{derive_edge_label, preprocess, ImageArray, ModelInput, SampleTriplet};
use crate::error::{Error, Result};

/// Accepted range of the salient foreground fraction.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.5);

/// Probability that a scene gets a poor depth map.
pub const POOR_DEPTH_PROB: f64 = 0.3;

/// Depth-sensor model: grid spacing as a fraction of the image side, noise std.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthQuality {
    pub grid_fraction: f64,
    pub noise_std: f64,
}

impl DepthQuality {
    pub const GOOD: DepthQuality = DepthQuality {
        grid_fraction: 1.0 / 16.0,
        noise_std: 0.015,
    };
    pub const POOR: DepthQuality = DepthQuality {
        grid_fraction: 1.0 / 8.0,
        noise_std: 0.08,
    };

    /// Grid spacing in pixels for an image of side `size`.
    pub fn stride(&self, size: usize) -> usize {
        ((size as f64 * self.grid_fraction) as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }

    /// A circle or rectangle lying fully inside an `s`×`s` canvas.
    fn sample(rng: &mut ChaCha8Rng, s: f64, circle: (f64, f64), side: (f64, f64)) -> Shape {
        if rng.random_bool(0.5) {
            let r = rng.random_range(circle.0 * s..=circle.1 * s);
            Shape::Circle {
                cx: rng.random_range(r..=s - r),
                cy: rng.random_range(r..=s - r),
                r,
            }
        } else {
            let w = rng.random_range(side.0 * s..=side.1 * s);
            let h = rng.random_range(side.0 * s..=side.1 * s);
            let x0 = rng.random_range(0.0..=s - w);
            let y0 = rng.random_range(0.0..=s - h);
            Shape::Rect {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            }
        }
    }
}

/// One rendered scene: planar RGB in [0,1], depth nearness in [0,1], binary mask.
#[derive(Debug, Clone)]
pub struct Scene {
    pub size: usize,
    pub rgb: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    pub depth_quality: DepthQuality,
}

impl Scene {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    /// The triplet this scene becomes after an 8-bit PNG round trip, without touching disk.
    pub fn to_triplet(&self, id: &str) -> SampleTriplet {
        let n = self.size * self.size;
        let q = |v: f64| to_u8(v) as f32 / 255.0;
        let mut rgb = vec![0.0f32; 3 * n];
        for (i, px) in self.rgb.iter().enumerate() {
            for c in 0..3 {
                rgb[c * n + i] = q(px[c]);
            }
        }
        let depth = self.depth.iter().map(|&d| q(d)).collect();
        let gt = ImageArray::new(
            1,
            self.size,
            self.size,
            self.mask.iter().map(|&m| m as u8 as f32).collect(),
        );
        SampleTriplet {
            id: id.to_string(),
            rgb: ImageArray::new(3, self.size, self.size, rgb),
            depth: ImageArray::new(1, self.size, self.size, depth),
            edge: derive_edge_label(&gt),
            gt,
        }
    }
}

/// Scenes `first..first + count` of dataset `seed`, preprocessed to `input_size`.
pub fn synthetic_inputs(seed: u64, first: usize, count: usize, size: usize, input_size: usize) -> Vec<ModelInput> {
    (first..first + count)
        .map(|i| {
            preprocess(
                &render_scene(seed, i as u64, size).to_triplet(&format!("scene_{i:05}")),
                input_size,
            )
        })
        .collect()
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt()
}

fn render_once(rng: &mut ChaCha8Rng, size: usize) -> Scene {
    let s = size as f64;
    let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.random_range(0.0..1.0));
    let c0 = color(rng);
    let c1 = lerp3(c0, color(rng), 0.5);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let near_bg = rng.random_range(0.1..0.25);
    let far_bg = near_bg + rng.random_range(0.0..0.15);
    // Projection of pixel centers on the gradient direction, normalized to [0,1].
    let proj = |x: f64, y: f64| {
        let half = 0.5 * (dx.abs() + dy.abs()) * s;
        (((x - s / 2.0) * dx + (y - s / 2.0) * dy) / half.max(1e-9) + 1.0) / 2.0
    };

    let mut rgb = Vec::with_capacity(size * size);
    let mut depth = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let t = proj(x as f64 + 0.5, y as f64 + 0.5).clamp(0.0, 1.0);
            rgb.push(lerp3(c0, c1, t));
            depth.push(near_bg + (far_bg - near_bg) * t);
        }
    }
    let background = lerp3(c0, c1, 0.5);

    let distractors = rng.random_range(0..=2);
    for _ in 0..distractors {
        let shape = Shape::sample(rng, s, (0.08, 0.2), (0.1, 0.35));
        let tint = background.map(|v| (v * rng.random_range(0.9..1.1)).clamp(0.0, 1.0));
        let d = rng.random_range(0.45..0.65);
        paint(&shape, size, &mut rgb, &mut depth, None, tint, d, 0.0);
    }

    let shape = Shape::sample(rng, s, (0.1, 0.3), (0.15, 0.6));
    let mut salient = color(rng);
    while distance(salient, background) < 0.4 {
        salient = color(rng);
    }
    let base = rng.random_range(0.8..0.9);
    let mut mask = vec![false; size * size];
    paint(&shape, size, &mut rgb, &mut depth, Some(&mut mask), salient, base, 0.1);
    let depth_quality = if rng.random_bool(POOR_DEPTH_PROB) {
        DepthQuality::POOR
    } else {
        DepthQuality::GOOD
    };
    let depth = degrade_depth(rng, &depth, size, depth_quality);
    Scene {
        size,
        rgb,
        depth,
        mask,
        depth_quality,
    }
}

/// Point-sample `depth` on the sensor grid, upsample back with half-pixel bilinear
/// interpolation and add clamped Gaussian noise.
fn degrade_depth(rng: &mut ChaCha8Rng, depth: &[f64], size: usize, quality: DepthQuality) -> Vec<f64> {
    let stride = quality.stride(size);
    let coarse_side = size.div_ceil(stride);
    let sample = |cy: usize, cx: usize| {
        let y = (cy * stride + stride / 2).min(size - 1);
        let x = (cx * stride + stride / 2).min(size - 1);
        depth[y * size + x]
    };
    // Source coordinate along one axis, split into a lower index and a weight.
    let locate = |p: usize| {
        let c = ((p as f64 + 0.5) / stride as f64 - 0.5).clamp(0.0, (coarse_side - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(coarse_side - 1), c - lo as f64)
    };
    let noise = Normal::new(0.0, quality.noise_std).expect("valid noise std");
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, wy) = locate(y);
        for x in 0..size {
            let (x0, x1, wx) = locate(x);
            let top = sample(y0, x0) * (1.0 - wx) + sample(y0, x1) * wx;
            let bottom = sample(y1, x0) * (1.0 - wx) + sample(y1, x1) * wx;
            let v = top * (1.0 - wy) + bottom * wy + noise.sample(rng);
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

/// Fill `shape` with a flat colour; depth rises by `relief` toward the shape centre.
#[allow(clippy::too_many_arguments)]
fn paint(
    shape: &Shape,
    size: usize,
    rgb: &mut [[f64; 3]],
    depth: &mut [f64],
    mut mask: Option<&mut Vec<bool>>,
    color: [f64; 3],
    base_depth: f64,
    relief: f64,
) {
    let (cx, cy, extent) = match *shape {
        Shape::Circle { cx, cy, r } => (cx, cy, r),
        Shape::Rect { x0, y0, x1, y1 } => ((x0 + x1) / 2.0, (y0 + y1) / 2.0, ((x1 - x0).max(y1 - y0)) / 2.0 * 1.5),
    };
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if shape.contains(px, py) {
                let i = y * size + x;
                rgb[i] = color;
                let dist = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() / extent.max(1e-9);
                depth[i] = base_depth + relief * (1.0 - dist.min(1.0));
                if let Some(m) = mask.as_deref_mut() {
                    m[i] = true;
                }
            }
        }
    }
}

/// Render scene `index` of a dataset; identical for identical `(seed, index, size)`.
pub fn render_scene(seed: u64, index: u64, size: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    loop {
        let scene = render_once(&mut rng, size);
        let f = scene.foreground_fraction();
        if f >= FOREGROUND_RANGE.0 && f <= FOREGROUND_RANGE.1 {
            return scene;
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(result: image::ImageResult<()>, path: &Path) -> Result<()> {
    result.map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Write `count` scenes as `rgb/`, `depth/`, `gt/` PNGs plus `manifest.json`
/// (a JSON list of ids). Returns the ids.
pub fn generate_synthetic_dataset(count: usize, seed: u64, size: usize, out_dir: &Path) -> Result<Vec<String>> {
    generate_synthetic_range(seed, 0, count, size, out_dir)
}

/// Like [`generate_synthetic_dataset`] for scenes `first..first + count`, so a held-out
/// set can continue where a training set stops.
pub fn generate_synthetic_range(
    seed: u64,
    first: usize,
    count: usize,
    size: usize,
    out_dir: &Path,
) -> Result<Vec<String>> {
    for sub in ["rgb", "depth", "gt"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let side = size as u32;
    let mut ids = Vec::with_capacity(count);
    for i in first..first + count {
        let id = format!("scene_{i:05}");
        let scene = render_scene(seed, i as u64, size);
        let rgb = RgbImage::from_fn(side, side, |x, y| Rgb(scene.rgb[(y * side + x) as usize].map(to_u8)));
        let depth = GrayImage::from_fn(side, side, |x, y| Luma([to_u8(scene.depth[(y * side + x) as usize])]));
        let gt = GrayImage::from_fn(side, side, |x, y| {
            Luma([if scene.mask[(y * side + x) as usize] { 255 } else { 0 }])
        });
        for (sub, result) in [
            ("rgb", rgb.save(out_dir.join("rgb").join(format!("{id}.png")))),
            ("depth", depth.save(out_dir.join("depth").join(format!("{id}.png")))),
            ("gt", gt.save(out_dir.join("gt").join(format!("{id}.png")))),
        ] {
            save(result, &out_dir.join(sub).join(format!("{id}.png")))?;
        }
        ids.push(id);
    }
    let manifest = out_dir.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&ids)?).map_err(|e| Error::io(&manifest, e))?;
    Ok(ids)
}
