//! Ground-truth datasets: darknet label files, directory indexing with
//! positive/negative accounting, photometric augmentation and a stratified
//! train/test split.
//!
//! A dataset directory holds images (`.png`, `.jpg`, `.jpeg`, `.bmp`) next
//! to label files with the same stem and a `.txt` extension. An empty label
//! file marks a negative image.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageError, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, ClassId};

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Suffixes appended to the image stem for each augmented variant.
pub const VARIANT_SUFFIXES: [&str; 3] = ["_bright", "_contrast", "_blur"];

/// Mid-level used by the contrast transfer function on 8-bit channels.
const CONTRAST_PIVOT: f64 = 128.0;

pub type Label = (ClassId, BBox);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelErrorKind {
    #[error("expected 5 fields, found {0}")]
    FieldCount(usize),
    #[error("invalid class id {0:?}")]
    ClassSyntax(String),
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("invalid number {0:?}")]
    Number(String),
    #[error("coordinate {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("non-positive extent {0}")]
    Extent(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {kind}")]
pub struct LabelError {
    pub line: usize,
    pub kind: LabelErrorKind,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}: image has no label file")]
    MissingLabel(PathBuf),
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("{path}: {source}")]
    Label {
        path: PathBuf,
        #[source]
        source: LabelError,
    },
    #[error("{path}: only 8-bit images are supported, found {color:?}")]
    UnsupportedDepth {
        path: PathBuf,
        color: image::ColorType,
    },
    #[error("output directory {0} is the source directory of an input image")]
    OutputIsSource(PathBuf),
    #[error("invalid augmentation spec: {0}")]
    InvalidAugmentation(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("no images found in {0}")]
    Empty(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses a darknet label file: one `class_id cx cy w h` record per line.
pub fn parse_labels(text: &str, class_count: usize) -> Result<Vec<Label>, LabelError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |kind| LabelError { line, kind };
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(err(LabelErrorKind::FieldCount(fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| err(LabelErrorKind::ClassSyntax(fields[0].to_string())))?;
        if id >= class_count.min(ClassId::COUNT) {
            return Err(err(LabelErrorKind::UnknownClass(id)));
        }
        let class = ClassId::from_index(id).map_err(|_| err(LabelErrorKind::UnknownClass(id)))?;
        let mut v = [0.0; 4];
        for (slot, field) in v.iter_mut().zip(&fields[1..]) {
            *slot = parse_coordinate(field)
                .ok_or_else(|| err(LabelErrorKind::Number(field.to_string())))?;
            if !(0.0..=1.0).contains(slot) {
                return Err(err(LabelErrorKind::OutOfRange(*slot)));
            }
        }
        for extent in [v[2], v[3]] {
            if extent <= 0.0 {
                return Err(err(LabelErrorKind::Extent(extent)));
            }
        }
        let bbox =
            BBox::new(v[0], v[1], v[2], v[3]).map_err(|_| err(LabelErrorKind::OutOfRange(v[2])))?;
        out.push((class, bbox));
    }
    Ok(out)
}

// Plain decimal notation only; rejects exponents, `inf` and `nan`.
fn parse_coordinate(s: &str) -> Option<f64> {
    if s.is_empty()
        || !s
            .bytes()
            .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+'))
    {
        return None;
    }
    s.parse().ok()
}

/// Writes labels in the darknet format. Inverse of [`parse_labels`].
pub fn serialize_labels(labels: &[Label]) -> String {
    let mut s = String::new();
    for (class, b) in labels {
        s.push_str(&format!(
            "{} {} {} {} {}\n",
            class.index(),
            b.cx(),
            b.cy(),
            b.w(),
            b.h()
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image_id: String,
    pub path: PathBuf,
    pub width_px: u32,
    pub height_px: u32,
    pub boxes: Vec<Label>,
}

impl LabeledImage {
    pub fn is_negative(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn label_path(&self) -> PathBuf {
        self.path.with_extension("txt")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub positive: usize,
    pub negative: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub name: String,
    pub images: Vec<LabeledImage>,
}

impl DatasetIndex {
    pub fn new(name: impl Into<String>, images: Vec<LabeledImage>) -> Self {
        Self {
            name: name.into(),
            images,
        }
    }

    pub fn counts(&self) -> DatasetCounts {
        let negative = self.images.iter().filter(|i| i.is_negative()).count();
        DatasetCounts {
            positive: self.images.len() - negative,
            negative,
            total: self.images.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Concatenates several indices, e.g. an augmented set with another.
    pub fn merge(name: impl Into<String>, parts: &[&DatasetIndex]) -> Self {
        let images = parts
            .iter()
            .flat_map(|p| p.images.iter().cloned())
            .collect();
        Self::new(name, images)
    }

    pub fn boxes(&self) -> impl Iterator<Item = &Label> {
        self.images.iter().flat_map(|i| i.boxes.iter())
    }
}

fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Reads one image header and its sibling label file.
pub fn load_labeled_image(path: &Path) -> Result<LabeledImage, DatasetError> {
    let label_path = path.with_extension("txt");
    if !label_path.is_file() {
        return Err(DatasetError::MissingLabel(path.to_path_buf()));
    }
    let (width_px, height_px) =
        image::image_dimensions(path).map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })?;
    let text = fs::read_to_string(&label_path).map_err(io_err(&label_path))?;
    let boxes = parse_labels(&text, ClassId::COUNT).map_err(|source| DatasetError::Label {
        path: label_path.clone(),
        source,
    })?;
    let image_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(LabeledImage {
        image_id,
        path: path.to_path_buf(),
        width_px,
        height_px,
        boxes,
    })
}

/// Indexes every image in `root` (non-recursive), sorted by file name.
pub fn index_dataset(root: &Path) -> Result<DatasetIndex, DatasetError> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if path.is_file() && is_image_path(&path) {
            paths.push(path);
        }
    }
    paths.sort();
    let images = paths
        .par_iter()
        .map(|p| load_labeled_image(p))
        .collect::<Result<Vec<_>, _>>()?;
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| root.display().to_string());
    Ok(DatasetIndex::new(name, images))
}

/// Indexes the images listed in a manifest file (one path per line;
/// relative paths resolve against the manifest's directory).
pub fn index_manifest(manifest: &Path) -> Result<DatasetIndex, DatasetError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let paths: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect();
    let images = paths
        .par_iter()
        .map(|p| load_labeled_image(p))
        .collect::<Result<Vec<_>, _>>()?;
    let name = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(DatasetIndex::new(name, images))
}

pub fn write_manifest(index: &DatasetIndex, path: &Path) -> Result<(), DatasetError> {
    let mut s = String::new();
    for img in &index.images {
        s.push_str(&img.path.display().to_string());
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub brightness_gain: f64,
    pub contrast_gain: f64,
    pub blur_kernel: u32,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            brightness_gain: 1.5,
            contrast_gain: 1.5,
            blur_kernel: 5,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.brightness_gain > 0.0 && self.brightness_gain.is_finite()) {
            return Err(DatasetError::InvalidAugmentation(format!(
                "brightness gain must be positive, got {}",
                self.brightness_gain
            )));
        }
        if !(self.contrast_gain > 0.0 && self.contrast_gain.is_finite()) {
            return Err(DatasetError::InvalidAugmentation(format!(
                "contrast gain must be positive, got {}",
                self.contrast_gain
            )));
        }
        if self.blur_kernel == 0 || self.blur_kernel.is_multiple_of(2) {
            return Err(DatasetError::InvalidAugmentation(format!(
                "blur kernel must be odd and positive, got {}",
                self.blur_kernel
            )));
        }
        Ok(())
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `clamp(round(gain * p))`
pub fn brighten_value(p: u8, gain: f64) -> u8 {
    clamp_u8(gain * p as f64)
}

/// `clamp(round(128 + gain * (p - 128)))`
pub fn contrast_value(p: u8, gain: f64) -> u8 {
    clamp_u8(CONTRAST_PIVOT + gain * (p as f64 - CONTRAST_PIVOT))
}

fn map_channels(img: &RgbImage, f: impl Fn(u8) -> u8) -> RgbImage {
    let lut: Vec<u8> = (0..=255u8).map(f).collect();
    let mut out = img.clone();
    for p in out.pixels_mut() {
        *p = Rgb([lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]]);
    }
    out
}

pub fn brighten(img: &RgbImage, gain: f64) -> RgbImage {
    map_channels(img, |p| brighten_value(p, gain))
}

pub fn adjust_contrast(img: &RgbImage, gain: f64) -> RgbImage {
    map_channels(img, |p| contrast_value(p, gain))
}

/// Mean filter over a `kernel x kernel` window with edge replication. The
/// channel mean is rounded half up.
pub fn box_blur(img: &RgbImage, kernel: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let r = (kernel / 2) as i64;
    let n = (kernel as u64) * (kernel as u64);
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut sum = [0u64; 3];
            for dy in -r..=r {
                let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as u32;
                for dx in -r..=r {
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as u32;
                    let p = img.get_pixel(sx, sy);
                    for c in 0..3 {
                        sum[c] += p[c] as u64;
                    }
                }
            }
            let px = sum.map(|s| ((s + n / 2) / n) as u8);
            out.put_pixel(x, y, Rgb(px));
        }
    }
    out
}

fn decode_rgb8(path: &Path) -> Result<RgbImage, DatasetError> {
    let img = image::open(path).map_err(|source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => Ok(img.to_rgb8()),
        other => Err(DatasetError::UnsupportedDepth {
            path: path.to_path_buf(),
            color: other.color(),
        }),
    }
}

fn augment_one(
    img: &LabeledImage,
    spec: &AugmentationSpec,
    out: &Path,
) -> Result<Vec<LabeledImage>, DatasetError> {
    let pixels = decode_rgb8(&img.path)?;
    let file_name = img
        .path
        .file_name()
        .ok_or_else(|| DatasetError::MissingLabel(img.path.clone()))?;
    let ext = img
        .path
        .extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_else(|| "png".to_string());
    let src_label = img.label_path();

    let original = out.join(file_name);
    fs::copy(&img.path, &original).map_err(io_err(&original))?;
    let original_label = original.with_extension("txt");
    fs::copy(&src_label, &original_label).map_err(io_err(&original_label))?;

    let variants = [
        brighten(&pixels, spec.brightness_gain),
        adjust_contrast(&pixels, spec.contrast_gain),
        box_blur(&pixels, spec.blur_kernel),
    ];
    let mut produced = vec![LabeledImage {
        path: original,
        ..img.clone()
    }];
    for (suffix, variant) in VARIANT_SUFFIXES.iter().zip(variants) {
        let stem = format!("{}{}", img.image_id, suffix);
        let path = out.join(format!("{stem}.{ext}"));
        variant.save(&path).map_err(|source| DatasetError::Image {
            path: path.clone(),
            source,
        })?;
        let label = path.with_extension("txt");
        fs::copy(&src_label, &label).map_err(io_err(&label))?;
        produced.push(LabeledImage {
            image_id: stem,
            path,
            ..img.clone()
        });
    }
    Ok(produced)
}

/// Writes each image plus its brightness, contrast and blur variants into
/// `out`, copying the label file unchanged for every variant. The returned
/// index lists the four outputs of each source image in order.
pub fn augment(
    index: &DatasetIndex,
    spec: &AugmentationSpec,
    out: &Path,
) -> Result<DatasetIndex, DatasetError> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let out_canon = out.canonicalize().map_err(io_err(out))?;
    for img in &index.images {
        if let Some(parent) = img.path.parent() {
            let parent = if parent.as_os_str().is_empty() {
                Path::new(".")
            } else {
                parent
            };
            if parent.canonicalize().ok().as_deref() == Some(out_canon.as_path()) {
                return Err(DatasetError::OutputIsSource(out.to_path_buf()));
            }
        }
    }
    let groups = index
        .images
        .par_iter()
        .map(|img| augment_one(img, spec, out))
        .collect::<Result<Vec<_>, _>>()?;
    let name = format!("{}-augmented", index.name);
    Ok(DatasetIndex::new(
        name,
        groups.into_iter().flatten().collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(DatasetError::InvalidSplit(format!(
                "train fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

// Guards floor() against products such as 0.29 * 100 = 28.999999999999996.
fn floor_fraction(x: f64) -> usize {
    (x + 1e-9).floor() as usize
}

/// Number of training images drawn from each stratum (positive, negative).
///
/// The total is `floor(fraction * n)`; each stratum gets the floor of its
/// own quota and the remainder goes to the stratum with the larger
/// fractional part (positives on ties).
pub fn stratified_quota(n_pos: usize, n_neg: usize, fraction: f64) -> (usize, usize) {
    let total = floor_fraction(fraction * (n_pos + n_neg) as f64);
    let q_pos = fraction * n_pos as f64;
    let q_neg = fraction * n_neg as f64;
    let mut pos = floor_fraction(q_pos).min(n_pos);
    let mut neg = floor_fraction(q_neg).min(n_neg);
    let mut rem_pos = q_pos - pos as f64;
    let mut rem_neg = q_neg - neg as f64;
    while pos + neg < total {
        if (rem_pos >= rem_neg && pos < n_pos) || neg >= n_neg {
            pos += 1;
            rem_pos = -1.0;
        } else {
            neg += 1;
            rem_neg = -1.0;
        }
    }
    (pos, neg)
}

/// Seeded split stratified by positive/negative. Both halves keep the
/// source index order.
pub fn split(
    index: &DatasetIndex,
    spec: &SplitSpec,
) -> Result<(DatasetIndex, DatasetIndex), DatasetError> {
    spec.validate()?;
    if index.len() < 2 {
        return Err(DatasetError::InvalidSplit(format!(
            "need at least 2 images, got {}",
            index.len()
        )));
    }
    let (mut positives, mut negatives): (Vec<usize>, Vec<usize>) =
        (0..index.len()).partition(|&i| !index.images[i].is_negative());
    let (n_pos, n_neg) = stratified_quota(positives.len(), negatives.len(), spec.train_fraction);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);

    let mut in_train = vec![false; index.len()];
    for &i in positives[..n_pos].iter().chain(&negatives[..n_neg]) {
        in_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = index
        .images
        .iter()
        .cloned()
        .zip(in_train)
        .partition(|(_, t)| *t);
    let strip = |v: Vec<(LabeledImage, bool)>| v.into_iter().map(|(img, _)| img).collect();
    Ok((
        DatasetIndex::new(format!("{}-train", index.name), strip(train)),
        DatasetIndex::new(format!("{}-test", index.name), strip(test)),
    ))
}
