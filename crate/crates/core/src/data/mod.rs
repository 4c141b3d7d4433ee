//! RGB-D triplet loading, edge-label derivation, preprocessing, batching and
//! prediction encoding. The synthetic scene generator lives in [`synth`].

pub mod synth;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, GrayImage};

use crate::error::{Error, Result};
use crate::nn::bilinear_matrix;

pub use synth::{
    generate_synthetic_dataset, generate_synthetic_range, render_scene, synthetic_inputs, DepthQuality, Scene,
};

/// Per-channel RGB means used for standardization.
pub const RGB_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
/// Per-channel RGB deviations used for standardization.
pub const RGB_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Planar `[C,H,W]` array of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageArray {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            channels * height * width,
            "array length does not match its shape"
        );
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
        Tensor::from_vec(self.data.clone(), (self.channels, self.height, self.width), device)?.to_dtype(dtype)
    }

    /// Bilinear resize of every channel (identity at equal size).
    pub fn resize(&self, height: usize, width: usize) -> ImageArray {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let my = bilinear_matrix(self.height, height);
        let mx = bilinear_matrix(self.width, width);
        let mut out = Vec::with_capacity(self.channels * height * width);
        let mut rows = vec![0.0f64; height * self.width];
        for c in 0..self.channels {
            let src = self.plane(c);
            rows.iter_mut().for_each(|v| *v = 0.0);
            for oy in 0..height {
                for iy in 0..self.height {
                    let wy = my[oy * self.height + iy];
                    if wy != 0.0 {
                        for x in 0..self.width {
                            rows[oy * self.width + x] += wy * src[iy * self.width + x] as f64;
                        }
                    }
                }
            }
            for oy in 0..height {
                for ox in 0..width {
                    let v: f64 = (0..self.width)
                        .map(|ix| mx[ox * self.width + ix] * rows[oy * self.width + ix])
                        .sum();
                    out.push(v as f32);
                }
            }
        }
        ImageArray::new(self.channels, height, width, out)
    }
}

/// One co-registered sample: values in [0,1], shared height and width.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTriplet {
    pub id: String,
    pub rgb: ImageArray,
    pub depth: ImageArray,
    pub gt: ImageArray,
    pub edge: ImageArray,
}

/// Network-ready sample at the configured input size.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub id: String,
    pub rgb: ImageArray,
    pub depth: ImageArray,
    pub gt: ImageArray,
    pub edge: ImageArray,
}

/// Stacked mini-batch tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub rgb: Tensor,
    pub depth: Tensor,
    pub gt: Tensor,
    pub edge: Tensor,
}

fn image_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| image_error(path, e.to_string()))
}

/// Read an 8-bit 3-channel image as `[3,H,W]` in [0,1].
pub fn read_rgb(path: &Path) -> Result<ImageArray> {
    let img = open_image(path)?;
    let img = match img {
        DynamicImage::ImageRgb8(i) => i,
        other => {
            return Err(image_error(
                path,
                format!("expected an 8-bit 3-channel image, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Ok(ImageArray::new(3, h, w, data))
}

/// Read a single-channel image (8- or 16-bit) as `[1,H,W]` in [0,1].
pub fn read_gray(path: &Path) -> Result<ImageArray> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(i) => i.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(i) => i.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        other => {
            return Err(image_error(
                path,
                format!("expected a single-channel image, found {:?}", other.color()),
            ))
        }
    };
    Ok(ImageArray::new(1, h, w, data))
}

/// Load one triplet and derive its edge label.
pub fn load_triplet(rgb_path: &Path, depth_path: &Path, gt_path: &Path) -> Result<SampleTriplet> {
    let rgb = read_rgb(rgb_path)?;
    let depth = read_gray(depth_path)?;
    let gt = read_gray(gt_path)?;
    let size = |a: &ImageArray| (a.height, a.width);
    for (name, a) in [("depth", &depth), ("gt", &gt)] {
        if size(a) != size(&rgb) {
            return Err(Error::DimensionMismatch(format!(
                "rgb {} is {}x{} but {name} {} is {}x{}",
                rgb_path.display(),
                rgb.height,
                rgb.width,
                if name == "depth" { depth_path } else { gt_path }.display(),
                a.height,
                a.width
            )));
        }
    }
    let edge = derive_edge_label(&gt);
    let id = rgb_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SampleTriplet {
        id,
        rgb,
        depth,
        gt,
        edge,
    })
}

/// Morphological gradient of the mask binarized at 0.5: 3×3 dilation and not 3×3
/// erosion, with replicated borders.
pub fn derive_edge_label(gt: &ImageArray) -> ImageArray {
    let (h, w) = (gt.height, gt.width);
    let mask: Vec<bool> = gt.plane(0).iter().map(|&v| v >= 0.5).collect();
    let mut edge = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut any, mut all) = (false, true);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let m = mask[yy * w + xx];
                    any |= m;
                    all &= m;
                }
            }
            if any && !all {
                edge[y * w + x] = 1.0;
            }
        }
    }
    ImageArray::new(1, h, w, edge)
}

fn standardize(rgb: &mut ImageArray) {
    let n = rgb.height * rgb.width;
    for c in 0..3 {
        for v in &mut rgb.data[c * n..(c + 1) * n] {
            *v = (*v - RGB_MEAN[c]) / RGB_STD[c];
        }
    }
}

/// Resize to `size`×`size` and standardize RGB; min-max normalize depth, replicate it
/// to three channels and standardize it like RGB. A missing depth map (single-modality
/// RGB models) becomes a constant map.
pub fn prepare_pair(rgb: &ImageArray, depth: Option<&ImageArray>, size: usize, id: &str) -> (ImageArray, ImageArray) {
    let mut rgb = rgb.resize(size, size);
    standardize(&mut rgb);

    let norm: Vec<f32> = match depth {
        Some(depth) => {
            let depth = depth.resize(size, size);
            let (lo, hi) = depth
                .data
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            if hi > lo {
                depth.data.iter().map(|&v| (v - lo) / (hi - lo)).collect()
            } else {
                log::warn!("sample {id}: constant depth map, using 0.5");
                vec![0.5; depth.data.len()]
            }
        }
        None => vec![0.5; size * size],
    };
    let mut depth3 = ImageArray::new(3, size, size, norm.repeat(3));
    standardize(&mut depth3);
    (rgb, depth3)
}

/// [`prepare_pair`] plus labels resized to `size`×`size`.
pub fn preprocess(t: &SampleTriplet, size: usize) -> ModelInput {
    let (rgb, depth) = prepare_pair(&t.rgb, Some(&t.depth), size, &t.id);
    ModelInput {
        id: t.id.clone(),
        rgb,
        depth,
        gt: t.gt.resize(size, size),
        edge: t.edge.resize(size, size),
    }
}

/// Stack samples into `[B,·,S,S]` tensors.
pub fn make_batch(samples: &[&ModelInput], dtype: DType, device: &Device) -> Result<Batch> {
    let stack = |f: &dyn Fn(&ModelInput) -> &ImageArray| -> Result<Tensor> {
        let parts = samples
            .iter()
            .map(|s| f(s).to_tensor(dtype, device))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::stack(&parts, 0)?)
    };
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        rgb: stack(&|s| &s.rgb)?,
        depth: stack(&|s| &s.depth)?,
        gt: stack(&|s| &s.gt)?,
        edge: stack(&|s| &s.edge)?,
    })
}

/// Map values in [0,1] to 8-bit gray with round-half-up; values within 1e-6 outside
/// the range are clamped, anything further is an error.
pub fn encode_prediction(map: &ImageArray) -> Result<GrayImage> {
    const SLACK: f32 = 1e-6;
    if map.channels != 1 {
        return Err(Error::Shape(format!(
            "prediction has {} channels, expected 1",
            map.channels
        )));
    }
    let mut px = Vec::with_capacity(map.data.len());
    for &v in &map.data {
        if !(-SLACK..=1.0 + SLACK).contains(&v) {
            return Err(Error::Range(format!("prediction value {v} outside [0,1]")));
        }
        px.push((255.0 * v.clamp(0.0, 1.0) as f64 + 0.5).floor() as u8);
    }
    Ok(GrayImage::from_raw(map.width as u32, map.height as u32, px).expect("buffer sized to the image"))
}

/// Save an 8-bit gray image as PNG.
pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| image_error(path, e.to_string()))
}

/// A dataset directory: `rgb/<id>.(png|jpg)`, `depth/<id>.png`, `gt/<id>.png`.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub ids: Vec<String>,
    rgb_files: Vec<PathBuf>,
}

fn stems(dir: &Path, exts: &[&str]) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", dir.display())));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if exts.contains(&ext.as_str()) {
            if let Some(stem) = path.file_stem() {
                out.push((stem.to_string_lossy().into_owned(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

impl DatasetDir {
    /// Index the directory; every RGB stem must have depth and GT files.
    pub fn open(root: &Path) -> Result<Self> {
        let rgb = stems(&root.join("rgb"), &["png", "jpg", "jpeg"])?;
        let depth: BTreeSet<String> = stems(&root.join("depth"), &["png"])?.into_iter().map(|s| s.0).collect();
        let gt: BTreeSet<String> = stems(&root.join("gt"), &["png"])?.into_iter().map(|s| s.0).collect();
        if rgb.is_empty() {
            return Err(Error::Dataset(format!("no images in {}", root.join("rgb").display())));
        }
        let missing: Vec<String> = rgb
            .iter()
            .filter(|(id, _)| !depth.contains(id) || !gt.contains(id))
            .map(|(id, _)| id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Dataset(format!(
                "{}: samples without depth or gt: {}",
                root.display(),
                missing.join(", ")
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            ids: rgb.iter().map(|(id, _)| id.clone()).collect(),
            rgb_files: rgb.into_iter().map(|(_, p)| p).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn gt_path(&self, index: usize) -> PathBuf {
        self.root.join("gt").join(format!("{}.png", self.ids[index]))
    }

    pub fn load(&self, index: usize) -> Result<SampleTriplet> {
        let id = &self.ids[index];
        load_triplet(
            &self.rgb_files[index],
            &self.root.join("depth").join(format!("{id}.png")),
            &self.gt_path(index),
        )
    }

    /// Load and preprocess every sample.
    pub fn load_all(&self, size: usize) -> Result<Vec<ModelInput>> {
        (0..self.len()).map(|i| Ok(preprocess(&self.load(i)?, size))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Luma, Rgb, RgbImage};

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> ImageArray {
        let mut a = ImageArray::filled(1, h, w, 0.0);
        for &(y, x) in on {
            a.data[y * w + x] = 1.0;
        }
        a
    }

    #[test]
    fn edge_label_examples() {
        assert!(derive_edge_label(&mask(5, 5, &[])).data.iter().all(|&v| v == 0.0));
        let e = derive_edge_label(&mask(4, 4, &[(1, 1), (1, 2), (2, 1), (2, 2)]));
        assert!(e.data.iter().all(|&v| v == 1.0));
        let full = ImageArray::filled(1, 6, 6, 1.0);
        assert!(derive_edge_label(&full).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_label_is_binary_subset_of_dilation() {
        let on: Vec<_> = (2..7).flat_map(|y| (3..6).map(move |x| (y, x))).collect();
        let m = mask(10, 10, &on);
        let e = derive_edge_label(&m);
        for y in 0..10 {
            for x in 0..10 {
                let v = e.at(0, y, x);
                assert!(v == 0.0 || v == 1.0);
                let near = on.iter().any(|&(a, b)| a.abs_diff(y) <= 1 && b.abs_diff(x) <= 1);
                if v == 1.0 {
                    assert!(near);
                }
            }
        }
        // Interior pixel is not an edge; the outer ring and the boundary are.
        assert_eq!(e.at(0, 4, 4), 0.0);
        assert_eq!(e.at(0, 4, 3), 1.0);
        assert_eq!(e.at(0, 4, 2), 1.0);
    }

    fn triplet(size: usize, depth_value: Option<f32>) -> SampleTriplet {
        let n = size * size;
        let depth = match depth_value {
            Some(v) => ImageArray::filled(1, size, size, v),
            None => ImageArray::new(1, size, size, (0..n).map(|i| i as f32 / n as f32).collect()),
        };
        let gt = ImageArray::new(
            1,
            size,
            size,
            (0..n).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        );
        SampleTriplet {
            id: "t".into(),
            rgb: ImageArray::filled(3, size, size, 0.5),
            depth,
            edge: derive_edge_label(&gt),
            gt,
        }
    }

    #[test]
    fn preprocess_shapes_and_normalization() {
        let m = preprocess(&triplet(128, None), 64);
        assert_eq!(m.rgb.shape(), [3, 64, 64]);
        assert_eq!(m.depth.shape(), [3, 64, 64]);
        assert_eq!(m.gt.shape(), [1, 64, 64]);
        assert_eq!(m.edge.shape(), [1, 64, 64]);
        assert!((m.rgb.at(0, 0, 0) - (0.5 - 0.485) / 0.229).abs() < 1e-6);
        assert!(m.depth.data.iter().all(|v| v.is_finite()));

        let same = preprocess(&triplet(64, None), 64);
        assert_eq!(same.gt, triplet(64, None).gt);
        // Min-max normalized depth spans [0,1] before standardization.
        let d0: Vec<f32> = same.depth.plane(0).iter().map(|v| v * 0.229 + 0.485).collect();
        let lo = d0.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = d0.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(lo.abs() < 1e-5 && (hi - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_depth_becomes_half() {
        let m = preprocess(&triplet(16, Some(0.3)), 16);
        for c in 0..3 {
            let want = (0.5 - RGB_MEAN[c]) / RGB_STD[c];
            assert!(m.depth.plane(c).iter().all(|v| (v - want).abs() < 1e-6));
        }
    }

    #[test]
    fn resize_twice_equals_once_at_same_size() {
        let t = triplet(32, None);
        let once = t.rgb.resize(16, 16);
        assert_eq!(once.resize(16, 16), once);
    }

    #[test]
    fn encode_prediction_rounding_and_range() {
        let enc = |v: f32| encode_prediction(&ImageArray::filled(1, 2, 2, v)).unwrap().into_raw();
        assert_eq!(enc(0.0), vec![0; 4]);
        assert_eq!(enc(1.0), vec![255; 4]);
        assert_eq!(enc(0.5), vec![128; 4]);
        assert_eq!(enc(-5e-7), vec![0; 4]);
        assert_eq!(enc(1.0 + 5e-7), vec![255; 4]);
        assert!(encode_prediction(&ImageArray::filled(1, 1, 1, 1.01)).is_err());
        assert!(encode_prediction(&ImageArray::filled(1, 1, 1, -0.01)).is_err());
    }

    fn write_rgb(path: &Path, w: u32, h: u32) {
        RgbImage::from_pixel(w, h, Rgb([10, 20, 30])).save(path).unwrap();
    }

    fn write_gray(path: &Path, w: u32, h: u32) {
        GrayImage::from_pixel(w, h, Luma([200])).save(path).unwrap();
    }

    #[test]
    fn load_triplet_contracts() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        write_rgb(&p("a.png"), 64, 64);
        write_gray(&p("d.png"), 64, 64);
        write_gray(&p("g.png"), 64, 64);
        let t = load_triplet(&p("a.png"), &p("d.png"), &p("g.png")).unwrap();
        assert_eq!(t.rgb.shape(), [3, 64, 64]);
        assert_eq!(t.edge.shape(), [1, 64, 64]);
        assert!((t.rgb.at(0, 0, 0) - 10.0 / 255.0).abs() < 1e-7);

        write_rgb(&p("g3.png"), 64, 64);
        let err = load_triplet(&p("a.png"), &p("d.png"), &p("g3.png")).unwrap_err();
        assert!(err.to_string().contains("g3.png"));

        write_gray(&p("small.png"), 32, 32);
        let err = load_triplet(&p("a.png"), &p("small.png"), &p("g.png")).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"));
    }

    #[test]
    fn dataset_dir_requires_matching_stems() {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["rgb", "depth", "gt"] {
            std::fs::create_dir(dir.path().join(sub)).unwrap();
        }
        for id in ["b", "a"] {
            write_rgb(&dir.path().join("rgb").join(format!("{id}.png")), 8, 8);
            write_gray(&dir.path().join("depth").join(format!("{id}.png")), 8, 8);
            write_gray(&dir.path().join("gt").join(format!("{id}.png")), 8, 8);
        }
        let ds = DatasetDir::open(dir.path()).unwrap();
        assert_eq!(ds.ids, vec!["a", "b"]);
        assert_eq!(ds.load_all(8).unwrap().len(), 2);

        std::fs::remove_file(dir.path().join("gt").join("b.png")).unwrap();
        assert!(DatasetDir::open(dir.path()).unwrap_err().to_string().contains('b'));
        std::fs::remove_dir_all(dir.path().join("gt")).unwrap();
        assert!(DatasetDir::open(dir.path()).unwrap_err().to_string().contains("gt"));
    }
}
