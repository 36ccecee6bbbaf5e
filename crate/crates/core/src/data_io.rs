//! Labels, images, dataset splits, detections files and synthetic scenes.
//!
//! A dataset directory holds `images/<id>.<ext>` and `labels/<id>.txt`.
//! Label lines are `class cx cy w h` with normalized coordinates written to
//! six decimals. Images are read and written as 8-bit RGB; `.png` and the
//! uncompressed `.ppm` are supported.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::retinex::ImagePair;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default split proportions: train, validation, test.
pub const DEFAULT_PROPORTIONS: [usize; 3] = [5000, 1000, 500];
pub const DEFAULT_IMAGE_SIZE: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image_id: String,
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// One box per non-empty line of `class cx cy w h`.
pub fn parse_labels(text: &str) -> Result<Vec<BBox>> {
    let mut boxes = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(parse_err(line, format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(line, format!("class id {:?} is not a non-negative integer", fields[0])))?;
        let mut v = [0.0; 4];
        for (slot, (name, field)) in v.iter_mut().zip(["cx", "cy", "w", "h"].iter().zip(&fields[1..])) {
            *slot = field
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("{name} {field:?} is not a number")))?;
        }
        let [cx, cy, w, h] = v;
        for (name, value) in [("cx", cx), ("cy", cy)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(parse_err(line, format!("{name} = {value} outside [0, 1]")));
            }
        }
        for (name, value) in [("w", w), ("h", h)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(parse_err(line, format!("{name} = {value} outside (0, 1]")));
            }
        }
        boxes.push(BBox { cx, cy, w, h, class_id });
    }
    Ok(boxes)
}

pub fn format_labels(boxes: &[BBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        let _ = writeln!(out, "{} {:.6} {:.6} {:.6} {:.6}", b.class_id, b.cx, b.cy, b.w, b.h);
    }
    out
}

fn image_format(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm" | "pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::Image {
            path: path.to_path_buf(),
            message: "unsupported image extension (use .png or .ppm)".into(),
        }),
    }
}

/// Reads an RGB image as a `3×H×W` tensor in `[0, 1]`, optionally resized
/// to `(width, height)` with bilinear filtering.
pub fn load_image(path: impl AsRef<Path>, resize: Option<(usize, usize)>) -> Result<Tensor> {
    let path = path.as_ref();
    let format = image_format(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let img = match resize {
        Some((w, h)) if (w as u32, h as u32) != img.dimensions() => {
            if w == 0 || h == 0 {
                return Err(Error::invalid(format!("resize target {w}×{h} is empty")));
            }
            image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
        }
        _ => img,
    };
    Ok(rgb_to_tensor(&img))
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        let p = img.get_pixel((rest % w) as u32, (rest / w) as u32);
        f64::from(p[c]) / 255.0
    })
}

/// Writes a `3×H×W` tensor, clamping to `[0, 1]` and rounding to 8 bits.
pub fn save_image(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = image_format(path)?;
    let (c, h, w) = tensor.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected a 3-channel image, got {c} channels")));
    }
    if !tensor.all_finite() {
        return Err(Error::NonFinite(format!("image for {}", path.display())));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let v = tensor.at3(ch, y as usize, x as usize).clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save_with_format(path, format).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Mean over all pixels and channels.
pub fn mean_brightness(image: &Tensor) -> f64 {
    image.mean()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Part sizes by largest remainder, ties to the earlier part.
pub fn split_sizes(n: usize, proportions: [usize; 3]) -> Result<[usize; 3]> {
    if proportions.contains(&0) {
        return Err(Error::invalid(format!("split proportions must be positive, got {proportions:?}")));
    }
    if n < proportions.len() {
        return Err(Error::invalid(format!("cannot split {n} ids into 3 parts")));
    }
    let total: usize = proportions.iter().sum();
    let mut sizes = proportions.map(|p| n * p / total);
    let mut remainders: Vec<(usize, usize)> =
        proportions.iter().enumerate().map(|(i, &p)| (n * p % total, i)).collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - sizes.iter().sum::<usize>();
    for &(_, i) in remainders.iter().take(short) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Seeded shuffle, then consecutive train/val/test parts.
pub fn split_dataset(ids: &[String], proportions: [usize; 3], seed: u64) -> Result<DatasetSplit> {
    let [a, b, _] = split_sizes(ids.len(), proportions)?;
    let mut order = ids.to_vec();
    Rng::new(seed).shuffle(&mut order);
    let test = order.split_off(a + b);
    let val = order.split_off(a);
    Ok(DatasetSplit {
        train: order,
        val,
        test,
        seed,
    })
}

const SPLIT_HEADERS: [&str; 3] = ["[train]", "[val]", "[test]"];

pub fn format_split(split: &DatasetSplit) -> String {
    let mut out = String::new();
    for (header, ids) in SPLIT_HEADERS.iter().zip([&split.train, &split.val, &split.test]) {
        out.push_str(header);
        out.push('\n');
        for id in ids {
            out.push_str(id);
            out.push('\n');
        }
    }
    out
}

/// Parses a split file; the seed is not stored and is returned as 0.
pub fn parse_split(text: &str) -> Result<DatasetSplit> {
    let mut parts: [Option<Vec<String>>; 3] = [None, None, None];
    let mut current: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(k) = SPLIT_HEADERS.iter().position(|h| *h == line) {
            if parts[k].is_some() {
                return Err(parse_err(idx + 1, format!("duplicate section {line}")));
            }
            parts[k] = Some(Vec::new());
            current = Some(k);
        } else {
            let k = current.ok_or_else(|| parse_err(idx + 1, "id before any section header"))?;
            parts[k].as_mut().expect("section opened").push(line.to_string());
        }
    }
    let [train, val, test] = parts.map(Option::unwrap_or_default);
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed: 0,
    })
}

/// Synthetic scene settings; sizes are fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_birds: usize,
    pub max_birds: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub num_classes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: DEFAULT_IMAGE_SIZE,
            height: DEFAULT_IMAGE_SIZE,
            min_birds: 1,
            max_birds: 6,
            min_size: 0.03,
            max_size: 0.3,
            num_classes: 1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene size must be positive"));
        }
        if self.min_birds > self.max_birds {
            return Err(Error::invalid(format!(
                "bird count range {}..={} is empty",
                self.min_birds, self.max_birds
            )));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return Err(Error::invalid(format!(
                "bird size range {}..{} must lie in (0, 1]",
                self.min_size, self.max_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("at least one class is required"));
        }
        Ok(())
    }
}

/// An axis-aligned elliptical blob in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Blob {
    /// Whether the center of pixel `(x, y)` lies inside the ellipse.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// A scene plus the blobs behind each of its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub labeled: LabeledImage,
    pub blobs: Vec<Blob>,
}

/// Sky gradient with dark elliptical birds; each box is tight to its blob's
/// drawn pixels.
pub fn gen_synthetic_scene(rng: &mut Rng, config: &SceneConfig, image_id: &str) -> Result<SyntheticScene> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let top = [
        rng.uniform_range(0.25, 0.45),
        rng.uniform_range(0.45, 0.65),
        rng.uniform_range(0.8, 0.95),
    ];
    let bottom = [
        rng.uniform_range(0.7, 0.85),
        rng.uniform_range(0.8, 0.9),
        rng.uniform_range(0.9, 1.0),
    ];
    let mut image = Tensor::from_fn(&[3, h, w], |i| {
        let (c, y) = (i / (h * w), (i % (h * w)) / w);
        let t = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        top[c] + t * (bottom[c] - top[c])
    });

    let count = config.min_birds + rng.below(config.max_birds - config.min_birds + 1);
    let (ln_lo, ln_hi) = (config.min_size.ln(), config.max_size.ln());
    let mut boxes = Vec::new();
    let mut blobs = Vec::new();
    for _ in 0..count {
        let size = rng.uniform_range(ln_lo, ln_hi).exp();
        let aspect = rng.uniform_range(0.4, 1.0);
        let rx = (size * w as f64 / 2.0).max(0.5);
        let ry = (size * aspect * h as f64 / 2.0).max(0.5);
        let blob = Blob {
            cx: rng.uniform_range(0.0, w as f64),
            cy: rng.uniform_range(0.0, h as f64),
            rx,
            ry,
        };
        let shade = rng.uniform_range(0.04, 0.2);
        let tint = [1.0, 0.9, 0.8];
        let x_lo = (blob.cx - rx).floor().max(0.0) as usize;
        let x_hi = ((blob.cx + rx).ceil() as usize).min(w);
        let y_lo = (blob.cy - ry).floor().max(0.0) as usize;
        let y_hi = ((blob.cy + ry).ceil() as usize).min(h);
        let mut extent: Option<(usize, usize, usize, usize)> = None;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                if !blob.covers(x, y) {
                    continue;
                }
                for (c, t) in tint.iter().enumerate() {
                    image.data_mut()[(c * h + y) * w + x] = shade * t;
                }
                extent = Some(match extent {
                    None => (x, x, y, y),
                    Some((a, b, c, d)) => (a.min(x), b.max(x), c.min(y), d.max(y)),
                });
            }
        }
        let class_id = rng.below(config.num_classes);
        if let Some((x0, x1, y0, y1)) = extent {
            boxes.push(BBox::from_corners(
                x0 as f64 / w as f64,
                y0 as f64 / h as f64,
                (x1 + 1) as f64 / w as f64,
                (y1 + 1) as f64 / h as f64,
                class_id,
            )?);
            blobs.push(blob);
        }
    }
    Ok(SyntheticScene {
        labeled: LabeledImage {
            image_id: image_id.to_string(),
            image,
            boxes,
        },
        blobs,
    })
}

/// `clamp(gain · x^γ + N(0, σ²), 0, 1)` per element.
pub fn darken(image: &Tensor, gamma: f64, gain: f64, noise_sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(gamma > 0.0 && gain > 0.0 && noise_sigma >= 0.0) || !(gamma.is_finite() && gain.is_finite() && noise_sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "darkening needs γ > 0, gain > 0, σ ≥ 0; got γ={gamma}, gain={gain}, σ={noise_sigma}"
        )));
    }
    let mut out = image.map(|x| gain * x.max(0.0).powf(gamma));
    if noise_sigma > 0.0 {
        for v in out.data_mut() {
            *v += rng.normal(0.0, noise_sigma);
        }
    }
    Ok(out.map(|x| x.clamp(0.0, 1.0)))
}

/// Settings for synthetic low/normal-light training pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairConfig {
    pub size: usize,
    pub gamma: (f64, f64),
    pub gain: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            size: 32,
            gamma: (1.5, 2.5),
            gain: (0.2, 0.5),
            noise_sigma: 0.01,
        }
    }
}

/// `n` scenes at `size×size` paired with darkened copies.
pub fn synthetic_pairs(n: usize, config: &PairConfig, seed: u64) -> Result<Vec<ImagePair>> {
    let scene = SceneConfig {
        width: config.size,
        height: config.size,
        min_size: 0.1,
        max_size: 0.5,
        ..Default::default()
    };
    let root = Rng::new(seed);
    (0..n)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let normal = gen_synthetic_scene(&mut rng, &scene, &image_id(i))?.labeled.image;
            let gamma = rng.uniform_range(config.gamma.0, config.gamma.1);
            let gain = rng.uniform_range(config.gain.0, config.gain.1);
            let low = darken(&normal, gamma, gain, config.noise_sigma, &mut rng)?;
            ImagePair::new(low, normal)
        })
        .collect()
}

/// Zero-padded image id for index `i`.
pub fn image_id(i: usize) -> String {
    format!("{i:06}")
}

/// Writes scenes as `images/<id>.<ext>` and `labels/<id>.txt`.
pub fn write_dataset(dir: impl AsRef<Path>, scenes: &[LabeledImage], ext: &str) -> Result<()> {
    let dir = dir.as_ref();
    let (images, labels) = (dir.join("images"), dir.join("labels"));
    for d in [&images, &labels] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in scenes {
        save_image(&s.image, images.join(format!("{}.{ext}", s.image_id)))?;
        let path = labels.join(format!("{}.txt", s.image_id));
        std::fs::write(&path, format_labels(&s.boxes)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// The labels directory of a dataset, or `dir` itself if it has no `labels/`.
pub fn labels_dir(dir: impl AsRef<Path>) -> PathBuf {
    let dir = dir.as_ref();
    let nested = dir.join("labels");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// All `*.txt` label files in `dir`, keyed by file stem.
pub fn read_labels_dir(dir: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<BBox>>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let boxes = parse_labels(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        out.insert(id.to_string(), boxes);
    }
    Ok(out)
}

/// One record per line: `image_id class score cx cy w h`.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 7 {
            return Err(parse_err(line, format!("expected 7 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(line, format!("class id {:?} is not a non-negative integer", fields[1])))?;
        let mut v = [0.0; 5];
        for (slot, field) in v.iter_mut().zip(&fields[2..]) {
            *slot = field
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("{field:?} is not a number")))?;
        }
        let [score, cx, cy, w, h] = v;
        let bbox = BBox::new(cx, cy, w, h, class_id).map_err(|e| parse_err(line, e.to_string()))?;
        out.push(Detection::new(fields[0], bbox, score).map_err(|e| parse_err(line, e.to_string()))?);
    }
    Ok(out)
}

pub fn format_detections(detections: &[Detection]) -> String {
    let mut out = String::new();
    for d in detections {
        let b = &d.bbox;
        let _ = writeln!(
            out,
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
            d.image_id, b.class_id, d.score, b.cx, b.cy, b.w, b.h
        );
    }
    out
}
