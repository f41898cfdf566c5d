//! Dataset ingestion: class-directory image trees, IDX file pairs, CSV of
//! flattened pixels, and the built-in seeded synthetic generator.
//!
//! All loaders normalize pixels to `[0, 1]` and order samples
//! deterministically (lexicographic by path, or generation order), so a
//! dataset is a pure function of its source description.

use crate::error::{Error, Result};
use crate::tensor::{clamp01, ImageTensor, SeededStream};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn validate(self) -> Result<Self> {
        if self.images.is_empty() {
            return Err(Error::InvalidInput(format!(
                "dataset {} ({}) is empty",
                self.name,
                self.split.as_str()
            )));
        }
        if self.images.len() != self.labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        let shape = self.images[0].shape();
        if self.images.iter().any(|x| x.shape() != shape) {
            return Err(Error::InvalidInput("mixed image shapes in dataset".into()));
        }
        Ok(self)
    }
}

/// Parameters of the built-in synthetic image generator.
///
/// Each class is a soft blob at a class-specific position on a ring,
/// carrying a class-specific lattice of single-pixel dots, over a
/// cluttered low-frequency background with pixel noise and random
/// distractor bumps. A trained model separates the classes easily, yet
/// the clutter keeps decision boundaries close in pixel space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_train")]
    pub train: usize,
    #[serde(default = "default_eval")]
    pub val: usize,
    #[serde(default = "default_eval")]
    pub test: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_classes() -> usize {
    3
}
fn default_channels() -> usize {
    1
}
fn default_side() -> usize {
    28
}
fn default_train() -> usize {
    600
}
fn default_eval() -> usize {
    100
}
fn default_seed() -> u64 {
    7
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: default_classes(),
            channels: default_channels(),
            height: default_side(),
            width: default_side(),
            train: default_train(),
            val: default_eval(),
            test: default_eval(),
            seed: default_seed(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig(
                "image dimensions must be positive".into(),
            ));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::InvalidConfig(
                "train and test splits must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone)]
pub enum DatasetSource {
    /// Directory of PNG/PGM files in class-named subdirectories.
    Directory { root: PathBuf },
    /// IDX image file plus IDX label file.
    Idx { images: PathBuf, labels: PathBuf },
    /// CSV with a `label` column followed by flattened pixels.
    Csv { path: PathBuf },
    /// Built-in seeded generator.
    Synthetic(SyntheticSpec),
}

pub fn load_dataset(source: &DatasetSource, split: Split) -> Result<Dataset> {
    match source {
        DatasetSource::Synthetic(spec) => generate_synthetic(spec, split),
        DatasetSource::Directory { root } => load_directory(root, split),
        DatasetSource::Idx { images, labels } => load_idx(images, labels, split),
        DatasetSource::Csv { path } => load_csv(path, split),
    }
}

// ---------------------------------------------------------------------------
// synthetic generator

/// Stride of the per-class dot lattice phase; class k shifts its dot grid
/// by k * DOT_PHASE so the grids never coincide.
const DOT_PHASE: usize = 3;

fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let (count, offset) = match split {
        Split::Train => (spec.train, 0),
        Split::Val => (spec.val, spec.train),
        Split::Test => (spec.test, spec.train + spec.val),
    };
    if count == 0 {
        return Err(Error::InvalidInput(format!(
            "synthetic {} split has zero samples",
            split.as_str()
        )));
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % spec.classes;
        let stream = SeededStream::new(spec.seed, (offset + i) as u64);
        images.push(synth_image(spec, class, stream));
        labels.push(class);
    }
    Dataset {
        name: "synthetic".into(),
        split,
        images,
        labels,
        num_classes: spec.classes,
    }
    .validate()
}

fn synth_image(spec: &SyntheticSpec, class: usize, stream: SeededStream) -> ImageTensor {
    let (h, w) = (spec.height, spec.width);
    let mut rng = stream.rng();
    let mut plane = vec![0.0f64; h * w];

    // low-frequency background clutter
    let base = 0.45 + rng.random_range(-0.05..0.05);
    for v in &mut plane {
        *v = base;
    }
    for _ in 0..3 {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let amp = rng.random_range(-0.12..0.12);
        let sigma = rng.random_range(5.0..9.0);
        add_bump(&mut plane, h, w, cy, cx, amp, sigma);
    }
    // distractor bumps, class-independent
    for _ in 0..2 {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let amp = rng.random_range(0.0..0.18);
        let sigma = rng.random_range(1.5..3.0);
        add_bump(&mut plane, h, w, cy, cx, amp, sigma);
    }

    // class blob on a ring around the center
    let angle = std::f64::consts::TAU * class as f64 / spec.classes as f64;
    let radius = 0.27 * h.min(w) as f64;
    let cy = h as f64 / 2.0 + radius * angle.sin() + rng.random_range(-1.5..1.5);
    let cx = w as f64 / 2.0 + radius * angle.cos() + rng.random_range(-1.5..1.5);
    let blob_amp = 0.32 + rng.random_range(-0.04..0.08);
    add_bump(&mut plane, h, w, cy, cx, blob_amp, 2.4);

    // class dot lattice: individually faint single-pixel dots, collectively
    // a strong cue, and exactly the structure a small median filter erases
    let dot_amp = 0.16 + rng.random_range(-0.02..0.02);
    for y in (0..h).step_by(7) {
        for x in (0..w).step_by(7) {
            let yy = y + (class * DOT_PHASE) % 7;
            let xx = x + (class * DOT_PHASE * 2) % 7;
            if yy < h && xx < w {
                plane[yy * w + xx] += dot_amp;
            }
        }
    }

    // pixel noise
    let noise = Normal::new(0.0, 0.04).expect("fixed std");
    for v in &mut plane {
        *v += noise.sample(&mut rng);
    }

    let data = if spec.channels == 1 {
        plane
    } else {
        // correlated channels with small independent offsets
        let mut all = Vec::with_capacity(spec.channels * h * w);
        for _ in 0..spec.channels {
            let shift = rng.random_range(-0.03..0.03);
            all.extend(plane.iter().map(|v| v + shift));
        }
        all
    };
    clamp01(&ImageTensor::from_vec(spec.channels, h, w, data).expect("constructed shape"))
}

fn add_bump(plane: &mut [f64], h: usize, w: usize, cy: f64, cx: f64, amp: f64, sigma: f64) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            plane[y * w + x] += amp * (-d2 * inv).exp();
        }
    }
}

// ---------------------------------------------------------------------------
// directory of images

fn load_directory(root: &Path, split: Split) -> Result<Dataset> {
    let display = root.display().to_string();
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(display.clone(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no class subdirectories under {display}"
        )));
    }

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png") | Some("pgm")
                )
            })
            .collect();
        files.sort();
        for file in files {
            images.push(decode_image(&file)?);
            labels.push(label);
        }
    }
    let num_classes = class_dirs.len();
    Dataset {
        name: display,
        split,
        images,
        labels,
        num_classes,
    }
    .validate()
}

fn decode_image(path: &Path) -> Result<ImageTensor> {
    let display = path.display().to_string();
    let img = image::open(path).map_err(|e| Error::parse(display.clone(), 0, e.to_string()))?;
    match img {
        image::DynamicImage::ImageLuma8(gray) => {
            let (w, h) = gray.dimensions();
            let data = gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
            ImageTensor::from_vec(1, h as usize, w as usize, data)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let (w, h) = (w as usize, h as usize);
            let mut data = vec![0.0; 3 * h * w];
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
                }
            }
            ImageTensor::from_vec(3, h, w, data)
        }
    }
}

// ---------------------------------------------------------------------------
// IDX pairs (big-endian magic per the de facto standard)

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::parse(path, offset as u64, "unexpected end of file"))
}

fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img_display = images_path.display().to_string();
    let bytes = fs::read(images_path).map_err(|e| Error::io(img_display.clone(), e))?;
    let magic = read_be_u32(&bytes, 0, &img_display)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse(
            img_display,
            0,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = read_be_u32(&bytes, 4, &img_display)? as usize;
    let h = read_be_u32(&bytes, 8, &img_display)? as usize;
    let w = read_be_u32(&bytes, 12, &img_display)? as usize;
    let expected = 16 + count * h * w;
    if bytes.len() != expected {
        return Err(Error::parse(
            img_display,
            bytes.len().min(expected) as u64,
            format!(
                "expected {expected} bytes for {count} {h}x{w} images, found {}",
                bytes.len()
            ),
        ));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * h * w;
        let data: Vec<f64> = bytes[start..start + h * w]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        images.push(ImageTensor::from_vec(1, h, w, data)?);
    }

    let lbl_display = labels_path.display().to_string();
    let lbytes = fs::read(labels_path).map_err(|e| Error::io(lbl_display.clone(), e))?;
    let lmagic = read_be_u32(&lbytes, 0, &lbl_display)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::parse(
            lbl_display,
            0,
            format!("bad label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let lcount = read_be_u32(&lbytes, 4, &lbl_display)? as usize;
    if lbytes.len() != 8 + lcount {
        return Err(Error::parse(
            lbl_display,
            lbytes.len().min(8 + lcount) as u64,
            "label payload length mismatch",
        ));
    }
    if lcount != count {
        return Err(Error::InvalidInput(format!(
            "{count} images but {lcount} labels"
        )));
    }
    let labels: Vec<usize> = lbytes[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset {
        name: images_path.display().to_string(),
        split,
        images,
        labels,
        num_classes: num_classes.max(2),
    }
    .validate()
}

// ---------------------------------------------------------------------------
// CSV of flattened pixels

/// Header `label,p0,p1,...`; pixel count must be `s*s` (one channel) or
/// `3*s*s` (three channels, planar order). Values above 1 anywhere in the
/// file mean 8-bit intensities, which are divided by 255.
fn load_csv(path: &Path, split: Split) -> Result<Dataset> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::parse(display.clone(), 0, e.to_string()))?;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let offset = e.position().map(|p| p.byte()).unwrap_or(0);
            Error::parse(display.clone(), offset, e.to_string())
        })?;
        let offset = record.position().map(|p| p.byte()).unwrap_or(0);
        let mut fields = record.iter();
        let label: usize = fields
            .next()
            .ok_or_else(|| Error::parse(display.clone(), offset, "missing label column"))?
            .trim()
            .parse()
            .map_err(|e| Error::parse(display.clone(), offset, format!("bad label: {e}")))?;
        let pixels: Vec<f64> = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(display.clone(), offset, format!("bad pixel: {e}")))
            })
            .collect::<Result<_>>()?;
        rows.push((label, pixels));
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("{display} has no data rows")));
    }
    let d = rows[0].1.len();
    let (channels, side) = infer_shape(d).ok_or_else(|| {
        Error::InvalidInput(format!(
            "cannot infer a square image shape from {d} pixel columns"
        ))
    })?;
    let eight_bit = rows.iter().any(|(_, px)| px.iter().any(|&v| v > 1.0));
    let mut images = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (label, mut pixels) in rows {
        if pixels.len() != d {
            return Err(Error::InvalidInput("ragged pixel rows in CSV".into()));
        }
        if eight_bit {
            for v in &mut pixels {
                *v /= 255.0;
            }
        }
        images.push(clamp01(&ImageTensor::from_vec(channels, side, side, pixels)?));
        labels.push(label);
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset {
        name: display,
        split,
        images,
        labels,
        num_classes: num_classes.max(2),
    }
    .validate()
}

fn infer_shape(d: usize) -> Option<(usize, usize)> {
    let side = (d as f64).sqrt().round() as usize;
    if side * side == d {
        return Some((1, side));
    }
    if d % 3 == 0 {
        let side = ((d / 3) as f64).sqrt().round() as usize;
        if 3 * side * side == d {
            return Some((3, side));
        }
    }
    None
}
